//! Procedural dynamic scenes with an exact analytic rendering oracle:
//! checkerboard ground, static buildings, per-sequence transient boxes,
//! moving boxes on linear or arc trajectories, per-sequence color gains.
//! Ground truth for every acceptance comparison.

use super::manifest::*;
use crate::geom::{Aabb, Mat3, Vec3};
use crate::imgio::{self, RgbImage};
use crate::lie::{interpolate_pose, se3_expmap, SE3Pose, SE3Tangent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("io failure: {0}")]
    IoFailure(String),
    #[error("invalid spec: {0}")]
    Invalid(String),
}

/// Depth sample emitted every Nth pixel in scanline order.
pub const DEPTH_STRIDE: usize = 8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundSpec {
    pub z: f64,
    /// Half extent of the ground patch in x and y.
    pub half_extent: f64,
    pub checker_size: f64,
    pub albedo_a: [f64; 3],
    pub albedo_b: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StaticBoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw_deg: f64,
    /// Albedo per face: -x, +x, -y, +y, -z, +z.
    pub face_albedo: [[f64; 3]; 6],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransientBoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw_deg: f64,
    pub albedo: [f64; 3],
    /// Sequence ids this box exists in.
    pub present_in: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Trajectory {
    Linear { start: [f64; 3], velocity: [f64; 3] },
    Arc { center: [f64; 2], radius: f64, height: f64, angle0_deg: f64, angular_velocity_deg: f64 },
}

impl Trajectory {
    /// Pose at time `t`: position plus heading-aligned yaw.
    pub fn pose_at(&self, t: f64) -> SE3Pose {
        match self {
            Trajectory::Linear { start, velocity } => {
                let p = Vec3::new(
                    start[0] + velocity[0] * t,
                    start[1] + velocity[1] * t,
                    start[2] + velocity[2] * t,
                );
                let yaw = velocity[1].atan2(velocity[0]);
                SE3Pose::new(rot_z(yaw), p)
            }
            Trajectory::Arc {
                center,
                radius,
                height,
                angle0_deg,
                angular_velocity_deg,
            } => {
                let a = (angle0_deg + angular_velocity_deg * t).to_radians();
                let p = Vec3::new(
                    center[0] + radius * a.cos(),
                    center[1] + radius * a.sin(),
                    *height,
                );
                // tangent heading
                let yaw = a + std::f64::consts::FRAC_PI_2 * angular_velocity_deg.signum();
                SE3Pose::new(rot_z(yaw), p)
            }
        }
    }
}

fn rot_z(yaw: f64) -> Mat3<f64> {
    let (s, c) = yaw.sin_cos();
    Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynamicBoxSpec {
    pub id: String,
    pub sequence: String,
    pub size: [f64; 3],
    pub albedo: [f64; 3],
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RigCameraSpec {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Camera-to-ego transform; camera looks along +z.
    pub extrinsic: SE3Pose,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceGenSpec {
    pub id: String,
    pub num_timestamps: usize,
    pub dt: f64,
    /// Global color gain of this capture.
    pub gain: f64,
    pub ego: Trajectory,
}

/// Gaussian pose perturbations written into the manifest (images stay
/// rendered from the true poses).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PoseNoiseSpec {
    pub ego_rot_std_deg: f64,
    pub ego_trans_std: f64,
    pub track_yaw_std_deg: f64,
    /// Translation noise as a fraction of the box footprint.
    pub track_xy_frac: f64,
}

impl PoseNoiseSpec {
    pub fn is_zero(&self) -> bool {
        self.ego_rot_std_deg == 0.0
            && self.ego_trans_std == 0.0
            && self.track_yaw_std_deg == 0.0
            && self.track_xy_frac == 0.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub ground: GroundSpec,
    pub static_boxes: Vec<StaticBoxSpec>,
    pub transient_boxes: Vec<TransientBoxSpec>,
    pub dynamic_boxes: Vec<DynamicBoxSpec>,
    pub sequences: Vec<SequenceGenSpec>,
    pub cameras: Vec<RigCameraSpec>,
    pub seed: u64,
    #[serde(default)]
    pub pose_noise: PoseNoiseSpec,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.sequences.is_empty() || self.cameras.is_empty() {
            return Err(SyntheticError::Invalid("need at least one sequence and camera".into()));
        }
        if self.cameras.len() > 3 {
            return Err(SyntheticError::Invalid("rig supports at most 3 cameras".into()));
        }
        for s in &self.sequences {
            if s.num_timestamps == 0 || s.dt <= 0.0 {
                return Err(SyntheticError::Invalid(format!("sequence {}: empty", s.id)));
            }
            if !(0.5..=1.5).contains(&s.gain) {
                return Err(SyntheticError::Invalid(format!(
                    "sequence {}: gain {} outside [0.5, 1.5]",
                    s.id, s.gain
                )));
            }
        }
        for d in &self.dynamic_boxes {
            if !self.sequences.iter().any(|s| s.id == d.sequence) {
                return Err(SyntheticError::Invalid(format!(
                    "dynamic box {} references unknown sequence {}",
                    d.id, d.sequence
                )));
            }
        }
        Ok(())
    }

    pub fn sequence_index(&self, id: &str) -> Option<usize> {
        self.sequences.iter().position(|s| s.id == id)
    }

    pub fn timestamps(&self, seq: usize) -> Vec<f64> {
        let s = &self.sequences[seq];
        (0..s.num_timestamps).map(|i| i as f64 * s.dt).collect()
    }

    /// Keyframe track of a dynamic box, sampled at the sequence
    /// timestamps (ego-relative poses, as annotations would be).
    pub fn object_track(&self, dyn_idx: usize) -> Vec<(f64, SE3Pose)> {
        let d = &self.dynamic_boxes[dyn_idx];
        let seq = self.sequence_index(&d.sequence).expect("validated");
        self.timestamps(seq)
            .iter()
            .map(|t| {
                let world = d.trajectory.pose_at(*t);
                let ego = self.sequences[seq].ego.pose_at(*t);
                let rel = crate::lie::compose(&crate::lie::inverse(&ego), &world);
                (*t, rel)
            })
            .collect()
    }

    /// World-frame pose of a dynamic box at time `t`, interpolated between
    /// track keyframes exactly like the engine does.
    pub fn object_pose_world(&self, dyn_idx: usize, t: f64) -> SE3Pose {
        let d = &self.dynamic_boxes[dyn_idx];
        let seq = self.sequence_index(&d.sequence).expect("validated");
        let track = self.object_track(dyn_idx);
        let ts = self.timestamps(seq);
        // clamp + bracket
        let (a, b) = if t <= ts[0] || ts.len() == 1 {
            (0, 0)
        } else if t >= *ts.last().unwrap() {
            (ts.len() - 1, ts.len() - 1)
        } else {
            let mut i = 0;
            while ts[i + 1] < t {
                i += 1;
            }
            (i, i + 1)
        };
        let nearest = nearest_index(&ts, t);
        let ego = self.sequences[seq].ego.pose_at(ts[nearest]);
        let local = if a == b {
            track[a].1
        } else {
            interpolate_pose(&track[a].1, &track[b].1, ts[a], ts[b], t)
        };
        crate::lie::compose(&ego, &local)
    }

    /// Geometric content bounds: ground patch, boxes, ego positions.
    pub fn content_bounds(&self) -> Aabb {
        let mut bb = Aabb::empty();
        let g = &self.ground;
        bb.include(&Vec3::new(-g.half_extent, -g.half_extent, g.z));
        bb.include(&Vec3::new(g.half_extent, g.half_extent, g.z + 0.1));
        let mut add_box = |center: &[f64; 3], size: &[f64; 3]| {
            let r = 0.5 * (size[0] * size[0] + size[1] * size[1] + size[2] * size[2]).sqrt();
            bb.include(&Vec3::new(center[0] - r, center[1] - r, center[2] - r));
            bb.include(&Vec3::new(center[0] + r, center[1] + r, center[2] + r));
        };
        for b in &self.static_boxes {
            add_box(&b.center, &b.size);
        }
        for b in &self.transient_boxes {
            add_box(&b.center, &b.size);
        }
        for (i, d) in self.dynamic_boxes.iter().enumerate() {
            let seq = self.sequence_index(&d.sequence).unwrap();
            for t in self.timestamps(seq) {
                let p = self.object_pose_world(i, t).translation;
                add_box(&[p.x(), p.y(), p.z()], &d.size);
            }
        }
        for (si, s) in self.sequences.iter().enumerate() {
            for t in self.timestamps(si) {
                bb.include(&s.ego.pose_at(t).translation);
            }
        }
        bb.padded(0.05, 1.0)
    }
}

fn nearest_index(ts: &[f64], t: f64) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (i, v) in ts.iter().enumerate() {
        let d = (v - t).abs();
        if d < bd {
            bd = d;
            best = i;
        }
    }
    best
}

/// A ray the oracle can shade: origin/direction plus sequence and time.
pub struct OracleRay {
    pub origin: Vec3<f64>,
    pub dir: Vec3<f64>,
    pub sequence: usize,
    pub time: f64,
    pub near: f64,
}

/// First-hit distance of a ray against an oriented box.
fn box_first_hit(
    origin: &Vec3<f64>,
    dir: &Vec3<f64>,
    pose: &SE3Pose,
    size: &[f64; 3],
    near: f64,
) -> Option<(f64, usize)> {
    let rt = pose.rotation.transpose();
    let p = rt.mul_vec(&(*origin - pose.translation));
    let q = rt.mul_vec(dir);
    let mut t0 = near;
    let mut t1 = f64::INFINITY;
    let mut axis_in = 0usize;
    let mut sign_in = 0i8;
    for a in 0..3 {
        let h = size[a] * 0.5;
        if q.0[a].abs() < 1e-12 {
            if p.0[a].abs() > h {
                return None;
            }
            continue;
        }
        let inv = 1.0 / q.0[a];
        let (ta, tb, sa) = {
            let ta = (-h - p.0[a]) * inv;
            let tb = (h - p.0[a]) * inv;
            if ta <= tb {
                (ta, tb, if inv > 0.0 { -1i8 } else { 1 })
            } else {
                (tb, ta, if inv > 0.0 { 1 } else { -1 })
            }
        };
        if ta > t0 {
            t0 = ta;
            axis_in = a;
            sign_in = sa;
        }
        t1 = t1.min(tb);
        if t0 >= t1 {
            return None;
        }
    }
    if t0 <= near {
        // origin inside the box: no first-hit face in front
        return None;
    }
    let face = axis_in * 2 + if sign_in > 0 { 1 } else { 0 };
    Some((t0, face))
}

/// Exact first-hit shading: Lambertian flat color (albedo × sequence
/// gain), black background, zero-depth sentinel on miss.
pub fn oracle_render(spec: &SyntheticSceneSpec, ray: &OracleRay) -> ([f64; 3], f64) {
    let gain = spec.sequences[ray.sequence].gain;
    let mut best_t = f64::INFINITY;
    let mut albedo = [0.0; 3];

    // ground plane
    let g = &spec.ground;
    if ray.dir.z().abs() > 1e-12 {
        let t = (g.z - ray.origin.z()) / ray.dir.z();
        if t > ray.near && t < best_t {
            let x = ray.origin.x() + t * ray.dir.x();
            let y = ray.origin.y() + t * ray.dir.y();
            if x.abs() <= g.half_extent && y.abs() <= g.half_extent {
                let cx = (x / g.checker_size).floor() as i64;
                let cy = (y / g.checker_size).floor() as i64;
                best_t = t;
                albedo = if (cx + cy).rem_euclid(2) == 0 {
                    g.albedo_a
                } else {
                    g.albedo_b
                };
            }
        }
    }

    for b in &spec.static_boxes {
        let pose = SE3Pose::new(rot_z(b.yaw_deg.to_radians()), Vec3::new(b.center[0], b.center[1], b.center[2]));
        if let Some((t, face)) = box_first_hit(&ray.origin, &ray.dir, &pose, &b.size, ray.near) {
            if t < best_t {
                best_t = t;
                albedo = b.face_albedo[face];
            }
        }
    }

    let seq_id = &spec.sequences[ray.sequence].id;
    for b in &spec.transient_boxes {
        if !b.present_in.iter().any(|s| s == seq_id) {
            continue;
        }
        let pose = SE3Pose::new(rot_z(b.yaw_deg.to_radians()), Vec3::new(b.center[0], b.center[1], b.center[2]));
        if let Some((t, _)) = box_first_hit(&ray.origin, &ray.dir, &pose, &b.size, ray.near) {
            if t < best_t {
                best_t = t;
                albedo = b.albedo;
            }
        }
    }

    for (i, d) in spec.dynamic_boxes.iter().enumerate() {
        if spec.sequence_index(&d.sequence).unwrap() != ray.sequence {
            continue;
        }
        let pose = spec.object_pose_world(i, ray.time);
        if let Some((t, _)) = box_first_hit(&ray.origin, &ray.dir, &pose, &d.size, ray.near) {
            if t < best_t {
                best_t = t;
                albedo = d.albedo;
            }
        }
    }

    if best_t.is_finite() {
        (
            [
                (albedo[0] * gain).clamp(0.0, 1.0),
                (albedo[1] * gain).clamp(0.0, 1.0),
                (albedo[2] * gain).clamp(0.0, 1.0),
            ],
            best_t,
        )
    } else {
        ([0.0, 0.0, 0.0], 0.0)
    }
}

pub fn camera_intrinsics(cam: &RigCameraSpec) -> Mat3<f64> {
    let f = 0.5 * cam.width as f64 / (cam.fov_deg.to_radians() / 2.0).tan();
    Mat3([
        [f, 0.0, cam.width as f64 / 2.0],
        [0.0, f, cam.height as f64 / 2.0],
        [0.0, 0.0, 1.0],
    ])
}

fn mat3_inv_upper(k: &Mat3<f64>) -> Mat3<f64> {
    let fx = k.0[0][0];
    let fy = k.0[1][1];
    let sk = k.0[0][1];
    let cx = k.0[0][2];
    let cy = k.0[1][2];
    Mat3([
        [1.0 / fx, -sk / (fx * fy), (sk * cy - cx * fy) / (fx * fy)],
        [0.0, 1.0 / fy, -cy / fy],
        [0.0, 0.0, 1.0],
    ])
}

/// Renders one full frame with the oracle.
pub fn oracle_frame(
    spec: &SyntheticSceneSpec,
    seq: usize,
    t: f64,
    cam: &RigCameraSpec,
) -> (RgbImage, Vec<f32>) {
    let k_inv = mat3_inv_upper(&camera_intrinsics(cam));
    let ego = spec.sequences[seq].ego.pose_at(t);
    let rot = ego.rotation.mul_mat(&cam.extrinsic.rotation);
    let origin = ego.rotation.mul_vec(&cam.extrinsic.translation) + ego.translation;
    let mut img = RgbImage::new(cam.width, cam.height);
    let mut depth = vec![0.0f32; cam.width * cam.height];
    for py in 0..cam.height {
        for px in 0..cam.width {
            let p = Vec3::new(px as f64 + 0.5, py as f64 + 0.5, 1.0);
            let dir = rot.mul_vec(&k_inv.mul_vec(&p)).normalized();
            let (c, d) = oracle_render(
                spec,
                &OracleRay {
                    origin,
                    dir,
                    sequence: seq,
                    time: t,
                    near: 1e-4,
                },
            );
            img.set_pixel(px, py, [c[0] as f32, c[1] as f32, c[2] as f32]);
            depth[py * cam.width + px] = d as f32;
        }
    }
    (img, depth)
}

/// Generates the dataset: oracle images, sparse depth maps, manifest with
/// exact (or optionally noise-perturbed) poses. Deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, out_dir: &Path) -> Result<DatasetManifest, SyntheticError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir.join("images"))
        .map_err(|e| SyntheticError::IoFailure(e.to_string()))?;
    std::fs::create_dir_all(out_dir.join("depth"))
        .map_err(|e| SyntheticError::IoFailure(e.to_string()))?;

    let max_len = spec
        .sequences
        .iter()
        .map(|s| (s.num_timestamps.saturating_sub(1)) as f64 * s.dt)
        .fold(0.0, f64::max)
        .max(1e-6);

    let cameras: Vec<CameraSpec> = spec
        .cameras
        .iter()
        .map(|c| CameraSpec {
            id: c.id.clone(),
            intrinsics: camera_intrinsics(c),
            extrinsic: c.extrinsic,
            width: c.width,
            height: c.height,
            mask: None,
        })
        .collect();

    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut gauss = |std: f64, rng: &mut ChaCha8Rng| -> f64 {
        if std == 0.0 {
            return 0.0;
        }
        // Box-Muller
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };

    let mut sequences = Vec::new();
    for (si, s) in spec.sequences.iter().enumerate() {
        let ts = spec.timestamps(si);
        let mut poses = Vec::new();
        for t in &ts {
            let true_pose = s.ego.pose_at(*t);
            let pose = if spec.pose_noise.is_zero() {
                true_pose
            } else {
                let n = &spec.pose_noise;
                let rot = n.ego_rot_std_deg.to_radians();
                let tau = SE3Tangent::from_slice(&[
                    gauss(n.ego_trans_std, &mut noise_rng),
                    gauss(n.ego_trans_std, &mut noise_rng),
                    gauss(n.ego_trans_std, &mut noise_rng),
                    gauss(rot, &mut noise_rng),
                    gauss(rot, &mut noise_rng),
                    gauss(rot, &mut noise_rng),
                ]);
                crate::lie::compose(&se3_expmap(&tau), &true_pose)
            };
            poses.push(pose);
        }
        sequences.push(SequenceSpec {
            id: s.id.clone(),
            timestamps: ts,
            ego_poses: poses,
        });
    }

    let mut objects = Vec::new();
    for (i, d) in spec.dynamic_boxes.iter().enumerate() {
        let track_true = spec.object_track(i);
        let track: Vec<TrackPoint> = track_true
            .iter()
            .map(|(t, pose)| {
                let pose = if spec.pose_noise.is_zero() {
                    *pose
                } else {
                    let n = &spec.pose_noise;
                    let yaw = gauss(n.track_yaw_std_deg.to_radians(), &mut noise_rng);
                    let dx = gauss(n.track_xy_frac * d.size[0], &mut noise_rng);
                    let dy = gauss(n.track_xy_frac * d.size[1], &mut noise_rng);
                    let delta = SE3Pose::new(rot_z(yaw), Vec3::new(dx, dy, 0.0));
                    crate::lie::compose(&delta, pose)
                };
                TrackPoint {
                    timestamp: *t,
                    pose,
                }
            })
            .collect();
        objects.push(ObjectSpec {
            id: d.id.clone(),
            sequence: d.sequence.clone(),
            size: Vec3::new(d.size[0], d.size[1], d.size[2]),
            track,
        });
    }

    // render all frames (parallel) and write files
    let mut jobs = Vec::new();
    for (si, s) in spec.sequences.iter().enumerate() {
        for (ti, t) in spec.timestamps(si).iter().enumerate() {
            for cam in &spec.cameras {
                jobs.push((si, ti, *t, cam.clone(), s.id.clone()));
            }
        }
    }
    let rendered: Vec<(FrameSpec, RgbImage, Vec<f32>)> = jobs
        .par_iter()
        .map(|(si, ti, t, cam, sid)| {
            let (img, depth_full) = oracle_frame(spec, *si, *t, cam);
            // sparse depth: every Nth pixel in scanline order
            let mut depth = vec![0.0f32; depth_full.len()];
            for (i, d) in depth_full.iter().enumerate() {
                if i % DEPTH_STRIDE == 0 {
                    depth[i] = *d;
                }
            }
            let image = format!("images/{sid}_{ti:03}_{}.ppm", cam.id);
            let depth_path = format!("depth/{sid}_{ti:03}_{}.raw", cam.id);
            (
                FrameSpec {
                    sequence: sid.clone(),
                    timestamp: *t,
                    camera: cam.id.clone(),
                    image,
                    depth: Some(depth_path),
                },
                img,
                depth,
            )
        })
        .collect();

    for (frame, img, depth) in &rendered {
        imgio::write_ppm(&out_dir.join(&frame.image), img)
            .map_err(|e| SyntheticError::IoFailure(e.to_string()))?;
        let cam = spec.cameras.iter().find(|c| c.id == frame.camera).unwrap();
        imgio::write_depth_raw(
            &out_dir.join(frame.depth.as_ref().unwrap()),
            cam.width,
            cam.height,
            depth,
        )
        .map_err(|e| SyntheticError::IoFailure(e.to_string()))?;
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        scene_bounds: spec.content_bounds(),
        max_sequence_length: max_len,
        cameras,
        sequences,
        frames: rendered.into_iter().map(|(f, _, _)| f).collect(),
        objects,
    };
    manifest
        .save(out_dir)
        .map_err(|e| SyntheticError::IoFailure(e.to_string()))?;
    Ok(manifest)
}
