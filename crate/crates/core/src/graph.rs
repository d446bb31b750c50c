//! Multi-level scene graph: root → sequence → camera/object nodes with
//! rigid-transform edges, trainable pose residuals on the edges, and
//! time-conditioned latent tables.
//!
//! World poses come from edge composition, so an ego-pose residual
//! propagates to every object of that frame. Residuals live on the Lie
//! algebra at discrete keyframes; residual-corrected poses (not residuals)
//! are interpolated in time.

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Real};
use crate::data::manifest::DatasetManifest;
use crate::dual::Dual;
use crate::encoding::{fourier_basis, FourierBasisConfig};
use crate::geom::{Aabb, Mat3, Vec3};
use crate::imgio;
use crate::lie::{
    compose, interpolate_pose, interpolate_pose_generic, se2_expmap_lifted,
    se2_expmap_lifted_generic, se3_expmap, se3_expmap_generic, BoundingBox3D, PoseG, SE2Tangent,
    SE3Pose, SE3Tangent,
};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

/// Dimension of every latent code (sequence appearance/geometry, object
/// shape/appearance).
pub const LATENT_DIM: usize = 32;

/// Padding applied to single-keyframe tracks when deciding activity.
const SINGLE_KEY_PAD: f64 = 0.1;

/// Initialization scale for latents and codes.
const LATENT_INIT_STD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("sequence {0} has no timestamps")]
    EmptySequence(String),
    #[error("unknown timestamp {1} in sequence {0}")]
    UnknownTimestamp(String, f64),
    #[error("unknown object {0}")]
    UnknownObject(String),
    #[error("unknown sequence {0}")]
    UnknownSequence(String),
    #[error("unknown camera {0}")]
    UnknownCamera(String),
    #[error("mask for camera {0} is {1}x{2}, expected {3}x{4}")]
    MaskShape(String, usize, usize, usize, usize),
    #[error("mask load failed: {0}")]
    MaskLoad(String),
}

pub struct SequenceNode {
    pub sequence_id: String,
    pub timestamps: Vec<f64>,
    pub ego_poses: Vec<SE3Pose>,
    /// `[T, 6]` se(3) residuals, one row per timestamp.
    pub residuals: ParamId,
}

pub struct CameraNode {
    pub camera_id: String,
    pub extrinsic: SE3Pose,
    pub intrinsics: Mat3<f64>,
    pub intrinsics_inv: Mat3<f64>,
    pub width: usize,
    pub height: usize,
    /// Row-major; `true` marks an excluded pixel.
    pub ego_mask: Option<Vec<bool>>,
}

impl CameraNode {
    pub fn is_masked(&self, px: usize, py: usize) -> bool {
        self.ego_mask
            .as_ref()
            .map(|m| m[py * self.width + px])
            .unwrap_or(false)
    }
}

pub struct ObjectNode {
    pub object_id: String,
    pub sequence: usize,
    pub track: Vec<(f64, SE3Pose)>,
    pub size: Vec3<f64>,
    /// `[K, 3]` se(2) residuals, one row per track keyframe.
    pub residuals: ParamId,
}

impl ObjectNode {
    pub fn track_span(&self) -> (f64, f64) {
        (self.track[0].0, self.track[self.track.len() - 1].0)
    }

    /// Activity window: track span padded by one inter-keyframe interval
    /// on each side.
    pub fn active_span(&self) -> (f64, f64) {
        let (t0, t1) = self.track_span();
        if self.track.len() == 1 {
            return (t0 - SINGLE_KEY_PAD, t1 + SINGLE_KEY_PAD);
        }
        let pad_lo = self.track[1].0 - self.track[0].0;
        let n = self.track.len();
        let pad_hi = self.track[n - 1].0 - self.track[n - 2].0;
        (t0 - pad_lo, t1 + pad_hi)
    }
}

/// Per-sequence appearance/geometry matrices. Stored transposed
/// (`[basis_dim, LATENT_DIM]`) so a basis row vector left-multiplies them.
pub struct LatentTable {
    pub appearance: Vec<ParamId>,
    pub geometry: Vec<ParamId>,
}

pub struct SceneGraph {
    pub sequences: Vec<SequenceNode>,
    pub cameras: Vec<CameraNode>,
    pub objects: Vec<ObjectNode>,
    pub latents: LatentTable,
    /// `[num_objects, LATENT_DIM]` shape codes.
    pub object_shape_codes: ParamId,
    /// `[num_objects, LATENT_DIM]` appearance codes.
    pub object_appearance_codes: ParamId,
    pub scene_bounds: Aabb,
    pub max_sequence_length: f64,
    pub fourier: FourierBasisConfig,
    /// Objects of each sequence, sorted by activity start.
    seq_objects: Vec<Vec<usize>>,
    seq_index: HashMap<String, usize>,
    cam_index: HashMap<String, usize>,
    obj_index: HashMap<String, usize>,
}

fn mat3_inverse(m: &Mat3<f64>) -> Mat3<f64> {
    let d = m.det();
    let e = &m.0;
    let adj = [
        [
            e[1][1] * e[2][2] - e[1][2] * e[2][1],
            e[0][2] * e[2][1] - e[0][1] * e[2][2],
            e[0][1] * e[1][2] - e[0][2] * e[1][1],
        ],
        [
            e[1][2] * e[2][0] - e[1][0] * e[2][2],
            e[0][0] * e[2][2] - e[0][2] * e[2][0],
            e[0][2] * e[1][0] - e[0][0] * e[1][2],
        ],
        [
            e[1][0] * e[2][1] - e[1][1] * e[2][0],
            e[0][1] * e[2][0] - e[0][0] * e[2][1],
            e[0][0] * e[1][1] - e[0][1] * e[1][0],
        ],
    ];
    let mut out = Mat3::zero();
    for i in 0..3 {
        for j in 0..3 {
            out.0[i][j] = adj[i][j] / d;
        }
    }
    out
}

impl SceneGraph {
    /// Builds the graph from a manifest: zero-initialized pose residuals,
    /// Gaussian-initialized latents and codes, masks loaded when
    /// `base_dir` is given.
    pub fn build<F: Real>(
        manifest: &DatasetManifest,
        base_dir: Option<&Path>,
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
    ) -> Result<SceneGraph, GraphError> {
        let fourier = FourierBasisConfig::default();
        let basis_dim = fourier.output_dim();
        let normal = Normal::new(0.0, LATENT_INIT_STD).unwrap();
        let mut gauss = |n: usize| -> Vec<F> {
            (0..n).map(|_| F::of(normal.sample(rng))).collect()
        };

        let mut seq_index = HashMap::new();
        let mut sequences = Vec::new();
        let mut latents = LatentTable {
            appearance: Vec::new(),
            geometry: Vec::new(),
        };
        for s in &manifest.sequences {
            if s.timestamps.is_empty() {
                return Err(GraphError::EmptySequence(s.id.clone()));
            }
            let idx = sequences.len();
            seq_index.insert(s.id.clone(), idx);
            let residuals = store.add(
                format!("pose.dp.{}", s.id),
                s.timestamps.len(),
                6,
                vec![F::zero(); s.timestamps.len() * 6],
                ParamGroup::Pose,
            );
            latents.appearance.push(store.add(
                format!("latent.app.{}", s.id),
                basis_dim,
                LATENT_DIM,
                gauss(basis_dim * LATENT_DIM),
                ParamGroup::Main,
            ));
            latents.geometry.push(store.add(
                format!("latent.geo.{}", s.id),
                basis_dim,
                LATENT_DIM,
                gauss(basis_dim * LATENT_DIM),
                ParamGroup::Main,
            ));
            sequences.push(SequenceNode {
                sequence_id: s.id.clone(),
                timestamps: s.timestamps.clone(),
                ego_poses: s.ego_poses.clone(),
                residuals,
            });
        }

        let mut cam_index = HashMap::new();
        let mut cameras = Vec::new();
        for c in &manifest.cameras {
            let ego_mask = match (&c.mask, base_dir) {
                (Some(rel), Some(dir)) => {
                    let (w, h, m) = imgio::read_mask_pgm(&dir.join(rel))
                        .map_err(|e| GraphError::MaskLoad(e.to_string()))?;
                    if (w, h) != (c.width, c.height) {
                        return Err(GraphError::MaskShape(c.id.clone(), w, h, c.width, c.height));
                    }
                    Some(m)
                }
                _ => None,
            };
            cam_index.insert(c.id.clone(), cameras.len());
            cameras.push(CameraNode {
                camera_id: c.id.clone(),
                extrinsic: c.extrinsic,
                intrinsics: c.intrinsics,
                intrinsics_inv: mat3_inverse(&c.intrinsics),
                width: c.width,
                height: c.height,
                ego_mask,
            });
        }

        for f in &manifest.frames {
            let si = *seq_index
                .get(&f.sequence)
                .ok_or_else(|| GraphError::DanglingReference(format!("frame sequence {}", f.sequence)))?;
            if !cam_index.contains_key(&f.camera) {
                return Err(GraphError::DanglingReference(format!("frame camera {}", f.camera)));
            }
            let seq = &manifest.sequences[si];
            if !seq.timestamps.iter().any(|t| (*t - f.timestamp).abs() < 1e-9) {
                return Err(GraphError::DanglingReference(format!(
                    "frame timestamp {} not in sequence {}",
                    f.timestamp, f.sequence
                )));
            }
        }

        let mut obj_index = HashMap::new();
        let mut objects = Vec::new();
        let num_objects = manifest.objects.len().max(1);
        for o in &manifest.objects {
            let sequence = *seq_index
                .get(&o.sequence)
                .ok_or_else(|| GraphError::DanglingReference(format!("object sequence {}", o.sequence)))?;
            let residuals = store.add(
                format!("pose.dxi.{}", o.id),
                o.track.len(),
                3,
                vec![F::zero(); o.track.len() * 3],
                ParamGroup::Pose,
            );
            obj_index.insert(o.id.clone(), objects.len());
            objects.push(ObjectNode {
                object_id: o.id.clone(),
                sequence,
                track: o.track.iter().map(|t| (t.timestamp, t.pose)).collect(),
                size: o.size,
                residuals,
            });
        }
        let object_shape_codes = store.add(
            "code.shape",
            num_objects,
            LATENT_DIM,
            gauss(num_objects * LATENT_DIM),
            ParamGroup::Main,
        );
        let object_appearance_codes = store.add(
            "code.app",
            num_objects,
            LATENT_DIM,
            gauss(num_objects * LATENT_DIM),
            ParamGroup::Main,
        );

        let mut seq_objects = vec![Vec::new(); sequences.len()];
        for (i, o) in objects.iter().enumerate() {
            seq_objects[o.sequence].push(i);
        }
        for list in seq_objects.iter_mut() {
            list.sort_by(|a, b| {
                objects[*a]
                    .active_span()
                    .0
                    .partial_cmp(&objects[*b].active_span().0)
                    .unwrap()
            });
        }

        Ok(SceneGraph {
            sequences,
            cameras,
            objects,
            latents,
            object_shape_codes,
            object_appearance_codes,
            scene_bounds: manifest.scene_bounds,
            max_sequence_length: manifest.max_sequence_length,
            fourier,
            seq_objects,
            seq_index,
            cam_index,
            obj_index,
        })
    }

    pub fn sequence_index(&self, id: &str) -> Result<usize, GraphError> {
        self.seq_index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownSequence(id.to_string()))
    }

    pub fn camera_index(&self, id: &str) -> Result<usize, GraphError> {
        self.cam_index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownCamera(id.to_string()))
    }

    pub fn object_index(&self, id: &str) -> Result<usize, GraphError> {
        self.obj_index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownObject(id.to_string()))
    }

    /// Index of the timestamp exactly matching `t` (1 ns tolerance).
    pub fn timestamp_index(&self, s: usize, t: f64) -> Result<usize, GraphError> {
        let seq = &self.sequences[s];
        seq.timestamps
            .iter()
            .position(|ts| (ts - t).abs() < 1e-9)
            .ok_or_else(|| GraphError::UnknownTimestamp(seq.sequence_id.clone(), t))
    }

    /// Index of the timestamp nearest to `t` (ties resolve to the earlier).
    pub fn nearest_timestamp_index(&self, s: usize, t: f64) -> usize {
        let ts = &self.sequences[s].timestamps;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, v) in ts.iter().enumerate() {
            let d = (v - t).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn ego_residual<F: Real>(&self, store: &ParamStore<F>, s: usize, ti: usize) -> SE3Tangent {
        let e = store.get(self.sequences[s].residuals);
        let row: Vec<f64> = e.row(ti).iter().map(|v| v.f64()).collect();
        SE3Tangent::from_slice(&row)
    }

    pub fn object_residual<F: Real>(
        &self,
        store: &ParamStore<F>,
        o: usize,
        key: usize,
    ) -> SE2Tangent {
        let e = store.get(self.objects[o].residuals);
        let row: Vec<f64> = e.row(key).iter().map(|v| v.f64()).collect();
        SE2Tangent::from_slice(&row)
    }

    /// `P̂ = exp(δP) ∘ P` at an exact sequence timestamp.
    pub fn refined_ego_pose<F: Real>(
        &self,
        store: &ParamStore<F>,
        s: usize,
        t: f64,
    ) -> Result<SE3Pose, GraphError> {
        let ti = self.timestamp_index(s, t)?;
        Ok(self.refined_ego_pose_at(store, s, ti))
    }

    pub fn refined_ego_pose_at<F: Real>(
        &self,
        store: &ParamStore<F>,
        s: usize,
        ti: usize,
    ) -> SE3Pose {
        let stored = self.sequences[s].ego_poses[ti];
        let tau = self.ego_residual(store, s, ti);
        if tau.to_array() == [0.0; 6] {
            return stored;
        }
        compose(&se3_expmap(&tau), &stored)
    }

    /// Residual-corrected object keyframe pose `ξ̂ = exp(δξ)_{SE2→SE3} ∘ ξ`.
    fn corrected_keyframe<F: Real>(&self, store: &ParamStore<F>, o: usize, key: usize) -> SE3Pose {
        let (_, xi) = self.objects[o].track[key];
        let tau = self.object_residual(store, o, key);
        if tau.to_array() == [0.0; 3] {
            return xi;
        }
        compose(&se2_expmap_lifted(&tau), &xi)
    }

    /// Bracketing keyframe indices for time `t`, after clamping to the
    /// track span.
    fn bracket(&self, o: usize, t: f64) -> (usize, usize, f64) {
        let track = &self.objects[o].track;
        if t <= track[0].0 || track.len() == 1 {
            return (0, 0, track[0].0);
        }
        let last = track.len() - 1;
        if t >= track[last].0 {
            return (last, last, track[last].0);
        }
        let mut i = 0;
        while track[i + 1].0 < t {
            i += 1;
        }
        (i, i + 1, t)
    }

    /// Ego-relative continuous-time object pose `ξ̂_o(t)`.
    pub fn object_pose_ego<F: Real>(&self, store: &ParamStore<F>, o: usize, t: f64) -> SE3Pose {
        let (a, b, tc) = self.bracket(o, t);
        let pa = self.corrected_keyframe(store, o, a);
        if a == b {
            return pa;
        }
        let pb = self.corrected_keyframe(store, o, b);
        let track = &self.objects[o].track;
        interpolate_pose(&pa, &pb, track[a].0, track[b].0, tc)
    }

    /// World-frame object pose: refined ego pose at the nearest frame
    /// composed with the interpolated ego-relative pose. Residual changes
    /// on the ego edge propagate through this output.
    pub fn object_pose_world<F: Real>(
        &self,
        store: &ParamStore<F>,
        o: usize,
        t: f64,
    ) -> Result<SE3Pose, GraphError> {
        if o >= self.objects.len() {
            return Err(GraphError::UnknownObject(format!("#{o}")));
        }
        let s = self.objects[o].sequence;
        let ti = self.nearest_timestamp_index(s, t);
        let ego = self.refined_ego_pose_at(store, s, ti);
        Ok(compose(&ego, &self.object_pose_ego(store, o, t)))
    }

    /// Objects of sequence `s` whose padded track span contains `t`, with
    /// world-frame boxes.
    pub fn active_objects<F: Real>(
        &self,
        store: &ParamStore<F>,
        s: usize,
        t: f64,
    ) -> Vec<(usize, BoundingBox3D)> {
        let mut out = Vec::new();
        for &o in &self.seq_objects[s] {
            let (lo, hi) = self.objects[o].active_span();
            if t >= lo && t <= hi {
                let pose = self
                    .object_pose_world(store, o, t)
                    .expect("object index from graph");
                out.push((
                    o,
                    BoundingBox3D {
                        pose,
                        size: self.objects[o].size,
                    },
                ));
            }
        }
        out
    }

    /// Normalized time in `[-1, 1]` relative to the sequence start.
    pub fn normalized_time(&self, s: usize, t: f64) -> f64 {
        let t0 = self.sequences[s].timestamps[0];
        (2.0 * (t - t0) / self.max_sequence_length - 1.0).clamp(-1.0, 1.0)
    }

    pub fn basis_at(&self, s: usize, t: f64) -> Vec<f64> {
        fourier_basis(self.normalized_time(s, t), &self.fourier).expect("clamped time in range")
    }

    /// `ω_s^t = [A_s F(t), G_s F(t)]` as (appearance, geometry) vectors.
    pub fn sequence_latent<F: Real>(
        &self,
        store: &ParamStore<F>,
        s: usize,
        t: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let basis = self.basis_at(s, t);
        let project = |pid: ParamId| -> Vec<f64> {
            let e = store.get(pid);
            let mut out = vec![0.0; LATENT_DIM];
            for (k, b) in basis.iter().enumerate() {
                let row = e.row(k);
                for (j, o) in out.iter_mut().enumerate() {
                    *o += b * row[j].f64();
                }
            }
            out
        };
        (
            project(self.latents.appearance[s]),
            project(self.latents.geometry[s]),
        )
    }

    // ---- dual-number chains for pose-residual gradients ----

    /// Refined ego pose with 6 derivative lanes seeded on `δP[s][ti]`.
    pub fn refined_ego_pose_dual<F: Real>(
        &self,
        store: &ParamStore<F>,
        s: usize,
        ti: usize,
    ) -> PoseG<Dual<6>> {
        let e = store.get(self.sequences[s].residuals);
        let row = e.row(ti);
        let rho = Vec3::new(
            Dual::var(row[0].f64(), 0),
            Dual::var(row[1].f64(), 1),
            Dual::var(row[2].f64(), 2),
        );
        let phi = Vec3::new(
            Dual::var(row[3].f64(), 3),
            Dual::var(row[4].f64(), 4),
            Dual::var(row[5].f64(), 5),
        );
        let exp = se3_expmap_generic(rho, phi);
        exp.compose(&self.sequences[s].ego_poses[ti].lift())
    }

    fn corrected_keyframe_dual<F: Real>(
        &self,
        store: &ParamStore<F>,
        o: usize,
        key: usize,
        lane0: usize,
    ) -> PoseG<Dual<12>> {
        let e = store.get(self.objects[o].residuals);
        let row = e.row(key);
        let exp = se2_expmap_lifted_generic(
            Dual::var(row[0].f64(), lane0),
            Dual::var(row[1].f64(), lane0 + 1),
            Dual::var(row[2].f64(), lane0 + 2),
        );
        exp.compose(&self.objects[o].track[key].1.lift())
    }

    /// World-frame object pose with 12 derivative lanes:
    /// 0..6 = `δP[s][nearest frame]`, 6..9 = `δξ[key_a]`, 9..12 = `δξ[key_b]`.
    pub fn object_pose_world_dual<F: Real>(
        &self,
        store: &ParamStore<F>,
        o: usize,
        t: f64,
    ) -> ObjectWorldDual {
        let s = self.objects[o].sequence;
        let ti = self.nearest_timestamp_index(s, t);

        // widen the ego dual from 6 to 12 lanes
        let ego6 = self.refined_ego_pose_dual(store, s, ti);
        let ego = widen_pose::<6, 12>(&ego6, 0);

        let (a, b, tc) = self.bracket(o, t);
        let pa = self.corrected_keyframe_dual(store, o, a, 6);
        let local = if a == b {
            pa
        } else {
            let pb = self.corrected_keyframe_dual(store, o, b, 9);
            let track = &self.objects[o].track;
            let alpha = (tc - track[a].0) / (track[b].0 - track[a].0);
            interpolate_pose_generic(&pa, &pb, Dual::constant(alpha))
        };
        ObjectWorldDual {
            pose: ego.compose(&local),
            sequence: s,
            ego_ti: ti,
            key_a: a,
            key_b: b,
        }
    }
}

pub struct ObjectWorldDual {
    pub pose: PoseG<Dual<12>>,
    pub sequence: usize,
    pub ego_ti: usize,
    pub key_a: usize,
    pub key_b: usize,
}

/// Re-embeds an `N`-lane dual pose into `M` lanes starting at `offset`.
fn widen_pose<const N: usize, const M: usize>(p: &PoseG<Dual<N>>, offset: usize) -> PoseG<Dual<M>> {
    let widen = |d: &Dual<N>| {
        let mut out = Dual::<M>::constant(d.re);
        out.dx[offset..offset + N].copy_from_slice(&d.dx);
        out
    };
    let mut rotation = Mat3::<Dual<M>>::zero();
    for i in 0..3 {
        for j in 0..3 {
            rotation.0[i][j] = widen(&p.rotation.0[i][j]);
        }
    }
    PoseG {
        rotation,
        translation: Vec3::new(
            widen(&p.translation.0[0]),
            widen(&p.translation.0[1]),
            widen(&p.translation.0[2]),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{
        CameraSpec, DatasetManifest, ObjectSpec, SequenceSpec, TrackPoint, MANIFEST_VERSION,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pose_xyz(x: f64, y: f64, z: f64) -> SE3Pose {
        SE3Pose::new(Mat3::identity(), Vec3::new(x, y, z))
    }

    fn two_sequence_manifest() -> DatasetManifest {
        let cam = CameraSpec {
            id: "cam0".into(),
            intrinsics: Mat3([[8.0, 0.0, 4.0], [0.0, 8.0, 4.0], [0.0, 0.0, 1.0]]),
            extrinsic: SE3Pose::identity(),
            width: 8,
            height: 8,
            mask: None,
        };
        let seq = |id: &str| SequenceSpec {
            id: id.into(),
            timestamps: vec![0.0, 1.0, 2.0],
            ego_poses: vec![pose_xyz(0.0, 0.0, 0.0), pose_xyz(1.0, 0.0, 0.0), pose_xyz(2.0, 0.0, 0.0)],
        };
        let object = |id: &str, seq: &str, x0: f64| ObjectSpec {
            id: id.into(),
            sequence: seq.into(),
            size: Vec3::new(1.0, 1.0, 1.0),
            track: vec![
                TrackPoint { timestamp: 0.0, pose: pose_xyz(x0, 2.0, 0.0) },
                TrackPoint { timestamp: 2.0, pose: pose_xyz(x0 + 4.0, 2.0, 0.0) },
            ],
        };
        DatasetManifest {
            version: MANIFEST_VERSION,
            scene_bounds: Aabb {
                min: Vec3::new(-10.0, -10.0, -1.0),
                max: Vec3::new(10.0, 10.0, 5.0),
            },
            max_sequence_length: 2.0,
            cameras: vec![cam],
            sequences: vec![seq("a"), seq("b")],
            frames: vec![],
            objects: vec![
                object("o1", "a", 0.0),
                object("o2", "a", 5.0),
                object("o3", "b", 0.0),
            ],
        }
    }

    fn build(manifest: &DatasetManifest) -> (SceneGraph, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = SceneGraph::build(manifest, None, &mut store, &mut rng).unwrap();
        (g, store)
    }

    #[test]
    fn build_counts_match_manifest() {
        let m = two_sequence_manifest();
        let (g, _) = build(&m);
        assert_eq!(g.sequences.len(), 2);
        assert_eq!(g.cameras.len(), 1);
        assert_eq!(g.objects.len(), 3);
    }

    #[test]
    fn minimal_manifest_no_objects() {
        let mut m = two_sequence_manifest();
        m.objects.clear();
        m.sequences.truncate(1);
        let (g, _) = build(&m);
        assert!(g.objects.is_empty());
    }

    #[test]
    fn dangling_reference_rejected() {
        let mut m = two_sequence_manifest();
        m.objects[0].sequence = "nope".into();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            SceneGraph::build(&m, None, &mut store, &mut rng),
            Err(GraphError::DanglingReference(_))
        ));
        let mut m = two_sequence_manifest();
        m.frames.push(crate::data::manifest::FrameSpec {
            sequence: "a".into(),
            timestamp: 0.0,
            camera: "ghost".into(),
            image: "x.ppm".into(),
            depth: None,
        });
        assert!(matches!(
            SceneGraph::build(&m, None, &mut ParamStore::<f64>::new(), &mut rng),
            Err(GraphError::DanglingReference(_))
        ));
    }

    #[test]
    fn zero_residuals_reproduce_manifest_poses_exactly() {
        let m = two_sequence_manifest();
        let (g, store) = build(&m);
        let p = g.refined_ego_pose(&store, 0, 1.0).unwrap();
        assert_eq!(p, m.sequences[0].ego_poses[1]);
        // object at a track timestamp reproduces the composition exactly
        let w = g.object_pose_world(&store, 0, 0.0).unwrap();
        let expect = compose(&m.sequences[0].ego_poses[0], &m.objects[0].track[0].pose);
        assert_eq!(w, expect);
    }

    #[test]
    fn refined_pose_applies_residual() {
        let m = two_sequence_manifest();
        let (g, mut store) = build(&m);
        let pid = g.sequences[0].residuals;
        store.get_mut(pid).data[0] = 0.1; // rho_x of timestamp 0
        let p = g.refined_ego_pose(&store, 0, 0.0).unwrap();
        assert!((p.translation.x() - 0.1).abs() < 1e-12);
        // matches composition oracle
        let tau = SE3Tangent::from_slice(&[0.1, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let expect = compose(&se3_expmap(&tau), &m.sequences[0].ego_poses[0]);
        assert_eq!(p, expect);
        assert!(matches!(
            g.refined_ego_pose(&store, 0, 0.5),
            Err(GraphError::UnknownTimestamp(_, _))
        ));
    }

    #[test]
    fn object_pose_clamps_and_interpolates() {
        let m = two_sequence_manifest();
        let (g, store) = build(&m);
        // before first keyframe clamps to it (ego still at nearest frame 0)
        let w = g.object_pose_world(&store, 0, -5.0).unwrap();
        let expect = compose(&m.sequences[0].ego_poses[0], &m.objects[0].track[0].pose);
        assert_eq!(w, expect);
        // midway: ego-relative translation is the midpoint of the track
        let local = g.object_pose_ego(&store, 0, 1.0);
        assert!((local.translation.x() - 2.0).abs() < 1e-12);
        assert!((local.translation.y() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn object_pose_continuous_in_time() {
        let m = two_sequence_manifest();
        let (g, mut store) = build(&m);
        // non-trivial residuals at both keyframes
        let pid = g.objects[0].residuals;
        store.get_mut(pid).data.copy_from_slice(&[0.05, -0.02, 0.3, -0.04, 0.06, -0.2]);
        // generic times: the nearest-ego-frame rule makes the composed pose
        // piecewise in t, with switches only at inter-frame midpoints
        let eps = 1e-6;
        for t in [0.3, 0.999999, 1.2] {
            let a = g.object_pose_world(&store, 0, t).unwrap();
            let b = g.object_pose_world(&store, 0, t + eps).unwrap();
            assert!((a.translation - b.translation).norm() < 1e-4);
        }
    }

    #[test]
    fn active_objects_filters_by_sequence_and_span() {
        let m = two_sequence_manifest();
        let (g, store) = build(&m);
        let act = g.active_objects(&store, 0, 1.0);
        assert_eq!(act.len(), 2);
        assert!(act.iter().all(|(o, _)| g.objects[*o].sequence == 0));
        // far outside every padded span
        let act = g.active_objects(&store, 0, 100.0);
        assert!(act.is_empty());
        // single-keyframe track at its keyframe
        let mut m2 = two_sequence_manifest();
        m2.objects[0].track.truncate(1);
        let (g2, store2) = build(&m2);
        let act = g2.active_objects(&store2, 0, 0.0);
        assert!(act.iter().any(|(o, _)| g2.objects[*o].object_id == "o1"));
    }

    #[test]
    fn sequence_latent_matches_dense_matvec() {
        let m = two_sequence_manifest();
        let (g, mut store) = build(&m);
        let (app, geo) = g.sequence_latent(&store, 0, 0.7);
        let basis = g.basis_at(0, 0.7);
        let e = store.get(g.latents.appearance[0]);
        for j in 0..LATENT_DIM {
            let mut acc = 0.0;
            for (k, b) in basis.iter().enumerate() {
                acc += b * e.data[k * LATENT_DIM + j];
            }
            assert!((app[j] - acc).abs() < 1e-12);
        }
        assert_eq!(geo.len(), LATENT_DIM);

        // zero appearance matrix -> zero vector
        let n = store.get(g.latents.appearance[0]).data.len();
        store.get_mut(g.latents.appearance[0]).data = vec![0.0; n];
        let (app, _) = g.sequence_latent(&store, 0, 0.3);
        assert!(app.iter().all(|v| *v == 0.0));

        // constant-basis-only matrix -> time independent
        let pid = g.latents.geometry[0];
        let e = store.get_mut(pid);
        e.data.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..LATENT_DIM {
            e.data[j] = j as f64 * 0.01; // first basis row = constant term
        }
        let (_, g1) = g.sequence_latent(&store, 0, 0.1);
        let (_, g2) = g.sequence_latent(&store, 0, 1.9);
        assert_eq!(g1, g2);
    }

    #[test]
    fn latent_linearity_in_matrices() {
        let m = two_sequence_manifest();
        let (g, mut store) = build(&m);
        let pid = g.latents.appearance[0];
        let orig = store.get(pid).data.clone();
        let (a1, _) = g.sequence_latent(&store, 0, 0.4);
        store.get_mut(pid).data.iter_mut().for_each(|v| *v *= 2.0);
        let (a2, _) = g.sequence_latent(&store, 0, 0.4);
        for (x, y) in a1.iter().zip(a2.iter()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        store.get_mut(pid).data = orig;
    }

    #[test]
    fn ego_dual_jacobian_matches_fd() {
        let m = two_sequence_manifest();
        let (g, mut store) = build(&m);
        let pid = g.sequences[0].residuals;
        store.get_mut(pid).data[..6].copy_from_slice(&[0.02, -0.01, 0.03, 0.05, -0.04, 0.01]);
        let dual = g.refined_ego_pose_dual(&store, 0, 0);
        let h = 1e-6;
        for lane in 0..6 {
            let orig = store.get(pid).data[lane];
            store.get_mut(pid).data[lane] = orig + h;
            let pp = g.refined_ego_pose_at(&store, 0, 0);
            store.get_mut(pid).data[lane] = orig - h;
            let pm = g.refined_ego_pose_at(&store, 0, 0);
            store.get_mut(pid).data[lane] = orig;
            for i in 0..3 {
                let fd = (pp.translation.0[i] - pm.translation.0[i]) / (2.0 * h);
                assert!((dual.translation.0[i].dx[lane] - fd).abs() < 1e-6);
                for j in 0..3 {
                    let fd = (pp.rotation.0[i][j] - pm.rotation.0[i][j]) / (2.0 * h);
                    assert!((dual.rotation.0[i][j].dx[lane] - fd).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn object_dual_jacobian_matches_fd() {
        let m = two_sequence_manifest();
        let (g, mut store) = build(&m);
        let ego_pid = g.sequences[0].residuals;
        let obj_pid = g.objects[0].residuals;
        store.get_mut(ego_pid).data[6..12].copy_from_slice(&[0.01, 0.02, -0.01, 0.02, -0.03, 0.04]);
        store.get_mut(obj_pid).data.copy_from_slice(&[0.05, -0.02, 0.1, -0.03, 0.04, -0.15]);
        let t = 0.8; // nearest frame index 1, bracket (0, 1)
        let dual = g.object_pose_world_dual(&store, 0, t);
        assert_eq!(dual.ego_ti, 1);
        assert_eq!((dual.key_a, dual.key_b), (0, 1));
        let h = 1e-6;
        // ego lanes
        for lane in 0..6 {
            let i = dual.ego_ti * 6 + lane;
            let orig = store.get(ego_pid).data[i];
            store.get_mut(ego_pid).data[i] = orig + h;
            let pp = g.object_pose_world(&store, 0, t).unwrap();
            store.get_mut(ego_pid).data[i] = orig - h;
            let pm = g.object_pose_world(&store, 0, t).unwrap();
            store.get_mut(ego_pid).data[i] = orig;
            for c in 0..3 {
                let fd = (pp.translation.0[c] - pm.translation.0[c]) / (2.0 * h);
                assert!(
                    (dual.pose.translation.0[c].dx[lane] - fd).abs() < 1e-5,
                    "ego lane {lane} comp {c}"
                );
            }
        }
        // object keyframe lanes
        for (key, lane0) in [(dual.key_a, 6), (dual.key_b, 9)] {
            for l in 0..3 {
                let i = key * 3 + l;
                let orig = store.get(obj_pid).data[i];
                store.get_mut(obj_pid).data[i] = orig + h;
                let pp = g.object_pose_world(&store, 0, t).unwrap();
                store.get_mut(obj_pid).data[i] = orig - h;
                let pm = g.object_pose_world(&store, 0, t).unwrap();
                store.get_mut(obj_pid).data[i] = orig;
                for c in 0..3 {
                    let fd = (pp.translation.0[c] - pm.translation.0[c]) / (2.0 * h);
                    assert!(
                        (dual.pose.translation.0[c].dx[lane0 + l] - fd).abs() < 1e-5,
                        "obj key {key} lane {l} comp {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn ego_residual_propagates_to_objects() {
        let m = two_sequence_manifest();
        let (g, mut store) = build(&m);
        let before = g.object_pose_world(&store, 0, 1.0).unwrap();
        let pid = g.sequences[0].residuals;
        store.get_mut(pid).data[6] = 0.5; // timestamp index 1, rho_x
        let after = g.object_pose_world(&store, 0, 1.0).unwrap();
        assert!((after.translation.x() - before.translation.x() - 0.5).abs() < 1e-9);
        // objects of the other sequence unaffected
        let other_before = g.object_pose_world(&store, 2, 1.0).unwrap();
        store.get_mut(pid).data[6] = 0.9;
        let other_after = g.object_pose_world(&store, 2, 1.0).unwrap();
        assert_eq!(other_before, other_after);
    }
}
