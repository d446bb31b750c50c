//! Radiance-field families: the static field (hash grid + density, color,
//! and transient heads), the shared dynamic object field, and two proposal
//! density fields, plus the density/color mixing rules.

use crate::autodiff::{NodeId, ParamGroup, ParamId, ParamStore, Real, Tape};
use crate::encoding::HashGridConfig;
use crate::geom::Vec3;
use crate::graph::LATENT_DIM;
use crate::lie::SE3Pose;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Dynamic-field queries outside this box-local ∞-norm radius return zero
/// density without evaluating the network; interpolated boxes can slightly
/// exceed the unit cube.
pub const PSI_LOCAL_GUARD: f64 = 0.55;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldConfig {
    pub static_grid: HashGridConfig,
    pub proposal_grid: HashGridConfig,
    /// Width of the single hidden layer in the static density head.
    pub sigma_hidden: usize,
    /// Width of the density feature vector handed to the color heads.
    pub geo_feat_dim: usize,
    /// Two hidden layers of the static color head.
    pub color_hidden: usize,
    /// Two hidden layers of the transient head.
    pub transient_hidden: usize,
    pub sh_degree: usize,
    /// Object field trunk: `psi_depth` layers of `psi_hidden`, skip
    /// connection re-injecting the input at `psi_skip`.
    pub psi_hidden: usize,
    pub psi_depth: usize,
    pub psi_skip: usize,
    pub psi_bottleneck: usize,
    pub psi_color_hidden: usize,
    pub pe_levels_pos: usize,
    pub pe_levels_dir: usize,
    pub proposal_hidden: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            static_grid: HashGridConfig::static_default(),
            proposal_grid: HashGridConfig::proposal_default(),
            sigma_hidden: 64,
            geo_feat_dim: 15,
            color_hidden: 64,
            transient_hidden: 64,
            sh_degree: 4,
            psi_hidden: 128,
            psi_depth: 4,
            psi_skip: 2,
            psi_bottleneck: 64,
            psi_color_hidden: 64,
            pe_levels_pos: 10,
            pe_levels_dir: 4,
            proposal_hidden: 32,
        }
    }
}

impl FieldConfig {
    pub fn sh_dim(&self) -> usize {
        self.sh_degree * self.sh_degree
    }

    pub fn pe_pos_dim(&self) -> usize {
        2 * self.pe_levels_pos * 3
    }

    pub fn pe_dir_dim(&self) -> usize {
        2 * self.pe_levels_dir * 3
    }
}

#[derive(Clone, Copy)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    fn init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Mlp {
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            // final layer starts small so heads begin near their bias
            let bound = if l == dims.len() - 2 { bound * 0.1 } else { bound };
            let w: Vec<F> = (0..fan_in * fan_out)
                .map(|_| F::of(rng.gen_range(-bound..bound)))
                .collect();
            let wid = store.add(format!("{name}.w{l}"), fan_in, fan_out, w, ParamGroup::Main);
            let bid = store.add(
                format!("{name}.b{l}"),
                1,
                fan_out,
                vec![F::zero(); fan_out],
                ParamGroup::Main,
            );
            layers.push(Layer { w: wid, b: bid });
        }
        Mlp { layers }
    }

    /// ReLU between layers, linear output.
    fn apply<F: Real>(&self, tape: &mut Tape<F>, input: NodeId) -> NodeId {
        let mut h = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.w);
            let b = tape.param(layer.b);
            h = tape.matmul(h, w);
            h = tape.add_row_vec(h, b);
            if l + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    /// ReLU trunk with the original input re-concatenated before `skip`.
    fn apply_with_skip<F: Real>(&self, tape: &mut Tape<F>, input: NodeId, skip: usize) -> NodeId {
        let mut h = input;
        for (l, layer) in self.layers.iter().enumerate() {
            if l == skip && l > 0 {
                h = tape.concat_cols(&[h, input]);
            }
            let w = tape.param(layer.w);
            let b = tape.param(layer.b);
            h = tape.matmul(h, w);
            h = tape.add_row_vec(h, b);
            if l + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }
}

/// Parameters of the static field, dynamic field, and the two proposal
/// fields. All tensors live in the shared [`ParamStore`].
pub struct FieldSet {
    pub cfg: FieldConfig,
    static_grid: ParamId,
    static_grid_cfg: Arc<HashGridConfig>,
    sigma_mlp: Mlp,
    color_mlp: Mlp,
    transient_mlp: Mlp,
    psi_trunk: Mlp,
    psi_head: Mlp,
    psi_color: Mlp,
    proposal: [ProposalField; 2],
}

struct ProposalField {
    grid: ParamId,
    grid_cfg: Arc<HashGridConfig>,
    head: Mlp,
}

fn init_grid<F: Real>(
    store: &mut ParamStore<F>,
    name: &str,
    cfg: &HashGridConfig,
    rng: &mut impl Rng,
) -> ParamId {
    let n = cfg.table_rows() * cfg.features_per_entry;
    let data: Vec<F> = (0..n).map(|_| F::of(rng.gen_range(-1e-4..1e-4))).collect();
    store.add(name, cfg.table_rows(), cfg.features_per_entry, data, ParamGroup::Main)
}

impl FieldSet {
    pub fn init<F: Real>(
        cfg: FieldConfig,
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
    ) -> FieldSet {
        cfg.static_grid.validate().expect("static grid config");
        cfg.proposal_grid.validate().expect("proposal grid config");
        let static_grid = init_grid(store, "phi.grid", &cfg.static_grid, rng);
        let grid_out = cfg.static_grid.output_dim();
        let sigma_mlp = Mlp::init(
            store,
            "phi.sigma",
            &[grid_out, cfg.sigma_hidden, cfg.geo_feat_dim + 1],
            rng,
        );
        let color_mlp = Mlp::init(
            store,
            "phi.color",
            &[
                cfg.geo_feat_dim + cfg.sh_dim() + LATENT_DIM,
                cfg.color_hidden,
                cfg.color_hidden,
                3,
            ],
            rng,
        );
        let transient_mlp = Mlp::init(
            store,
            "phi.transient",
            &[
                cfg.geo_feat_dim + LATENT_DIM,
                cfg.transient_hidden,
                cfg.transient_hidden,
                4,
            ],
            rng,
        );
        let psi_in = cfg.pe_pos_dim() + LATENT_DIM;
        let mut trunk_dims = vec![psi_in];
        for l in 0..cfg.psi_depth {
            // the skip layer consumes hidden + re-injected input
            let _ = l;
            trunk_dims.push(cfg.psi_hidden);
        }
        let psi_trunk = {
            let mut layers = Vec::new();
            for l in 0..cfg.psi_depth {
                let fan_in = if l == 0 {
                    psi_in
                } else if l == cfg.psi_skip {
                    cfg.psi_hidden + psi_in
                } else {
                    cfg.psi_hidden
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let w: Vec<F> = (0..fan_in * cfg.psi_hidden)
                    .map(|_| F::of(rng.gen_range(-bound..bound)))
                    .collect();
                let wid = store.add(format!("psi.trunk.w{l}"), fan_in, cfg.psi_hidden, w, ParamGroup::Main);
                let bid = store.add(
                    format!("psi.trunk.b{l}"),
                    1,
                    cfg.psi_hidden,
                    vec![F::zero(); cfg.psi_hidden],
                    ParamGroup::Main,
                );
                layers.push(Layer { w: wid, b: bid });
            }
            Mlp { layers }
        };
        let psi_head = Mlp::init(
            store,
            "psi.head",
            &[cfg.psi_hidden, cfg.psi_bottleneck + 1],
            rng,
        );
        let psi_color = Mlp::init(
            store,
            "psi.color",
            &[
                cfg.psi_bottleneck + cfg.pe_dir_dim() + 2 * LATENT_DIM,
                cfg.psi_color_hidden,
                3,
            ],
            rng,
        );
        let proposal = [0, 1].map(|i| {
            let grid = init_grid(store, &format!("prop{i}.grid"), &cfg.proposal_grid, rng);
            let head = Mlp::init(
                store,
                &format!("prop{i}.head"),
                &[
                    cfg.proposal_grid.output_dim() + LATENT_DIM,
                    cfg.proposal_hidden,
                    1,
                ],
                rng,
            );
            ProposalField {
                grid,
                grid_cfg: Arc::new(cfg.proposal_grid),
                head,
            }
        });
        FieldSet {
            static_grid_cfg: Arc::new(cfg.static_grid),
            cfg,
            static_grid,
            sigma_mlp,
            color_mlp,
            transient_mlp,
            psi_trunk,
            psi_head,
            psi_color,
            proposal,
        }
    }

    /// Static field: positions in normalized scene coordinates `[N, 3]`
    /// (contracted internally), unit view directions, and per-row
    /// appearance/geometry codes. Returns blended `(σ [N,1], c [N,3])`
    /// plus the base/transient split for diagnostics.
    pub fn static_query<F: Real>(
        &self,
        tape: &mut Tape<F>,
        x_norm: NodeId,
        dir: NodeId,
        app_code: NodeId,
        geo_code: NodeId,
    ) -> StaticQueryNodes {
        let xc = tape.contract(x_norm);
        let feats = tape.hash_grid(xc, self.static_grid, self.static_grid_cfg.clone());
        let sig_out = self.sigma_mlp.apply(tape, feats);
        let h = tape.slice_cols(sig_out, 0, self.cfg.geo_feat_dim);
        let sigma_raw = tape.slice_cols(sig_out, self.cfg.geo_feat_dim, 1);
        let sigma_base = tape.softplus(sigma_raw);

        let sh = tape.sh_enc(dir, self.cfg.sh_degree);
        let color_in = tape.concat_cols(&[h, sh, app_code]);
        let color_raw = self.color_mlp.apply(tape, color_in);
        let color_base = tape.sigmoid(color_raw);

        let trans_in = tape.concat_cols(&[h, geo_code]);
        let trans_raw = self.transient_mlp.apply(tape, trans_in);
        let trans_sigma_raw = tape.slice_cols(trans_raw, 0, 1);
        let trans_color_raw = tape.slice_cols(trans_raw, 1, 3);
        let sigma_transient = tape.softplus(trans_sigma_raw);
        let color_transient = tape.sigmoid(trans_color_raw);

        let sigma = tape.add(sigma_base, sigma_transient);
        let color = tape.color_blend(sigma_base, color_base, sigma_transient, color_transient);
        StaticQueryNodes {
            sigma,
            color,
            sigma_base,
            sigma_transient,
        }
    }

    /// Dynamic object field in box-local coordinates. The density path
    /// sees position and shape code only; the color head additionally
    /// sees direction, object appearance, and sequence appearance.
    pub fn dynamic_query<F: Real>(
        &self,
        tape: &mut Tape<F>,
        x_local: NodeId,
        d_local: NodeId,
        shape_code: NodeId,
        appearance_code: NodeId,
        seq_appearance: NodeId,
    ) -> (NodeId, NodeId) {
        let pe_x = tape.pos_enc(x_local, self.cfg.pe_levels_pos);
        let trunk_in = tape.concat_cols(&[pe_x, shape_code]);
        let trunk = self
            .psi_trunk
            .apply_with_skip(tape, trunk_in, self.cfg.psi_skip);
        let trunk = tape.relu(trunk);
        let head = self.psi_head.apply(tape, trunk);
        let bottleneck = tape.slice_cols(head, 0, self.cfg.psi_bottleneck);
        let sigma_raw = tape.slice_cols(head, self.cfg.psi_bottleneck, 1);
        let sigma = tape.softplus(sigma_raw);

        let pe_d = tape.pos_enc(d_local, self.cfg.pe_levels_dir);
        let color_in = tape.concat_cols(&[bottleneck, pe_d, appearance_code, seq_appearance]);
        let color_raw = self.psi_color.apply(tape, color_in);
        let color = tape.sigmoid(color_raw);
        (sigma, color)
    }

    /// Density-only dynamic query for the proposal stages.
    pub fn dynamic_density<F: Real>(
        &self,
        tape: &mut Tape<F>,
        x_local: NodeId,
        shape_code: NodeId,
    ) -> NodeId {
        let pe_x = tape.pos_enc(x_local, self.cfg.pe_levels_pos);
        let trunk_in = tape.concat_cols(&[pe_x, shape_code]);
        let trunk = self
            .psi_trunk
            .apply_with_skip(tape, trunk_in, self.cfg.psi_skip);
        let trunk = tape.relu(trunk);
        let head = self.psi_head.apply(tape, trunk);
        let sigma_raw = tape.slice_cols(head, self.cfg.psi_bottleneck, 1);
        tape.softplus(sigma_raw)
    }

    /// Proposal density at `level`, conditioned on the sequence geometry
    /// code.
    pub fn proposal_query<F: Real>(
        &self,
        tape: &mut Tape<F>,
        x_norm: NodeId,
        geo_code: NodeId,
        level: usize,
    ) -> NodeId {
        let p = &self.proposal[level];
        let xc = tape.contract(x_norm);
        let feats = tape.hash_grid(xc, p.grid, p.grid_cfg.clone());
        let head_in = tape.concat_cols(&[feats, geo_code]);
        let raw = p.head.apply(tape, head_in);
        tape.softplus(raw)
    }
}

pub struct StaticQueryNodes {
    pub sigma: NodeId,
    pub color: NodeId,
    pub sigma_base: NodeId,
    pub sigma_transient: NodeId,
}

/// Density/color mixture of two fields (plain arithmetic form).
/// Callers must pass zero dynamic density outside boxes.
pub fn mix(
    sigma_a: f64,
    color_a: [f64; 3],
    sigma_b: f64,
    color_b: [f64; 3],
) -> (f64, [f64; 3]) {
    let sigma = sigma_a + sigma_b;
    if sigma < crate::autodiff::BLEND_EPS {
        return (sigma, color_a);
    }
    let mut c = [0.0; 3];
    for i in 0..3 {
        c[i] = (sigma_a * color_a[i] + sigma_b * color_b[i]) / sigma;
    }
    (sigma, c)
}

/// Transforms a world point and direction into the normalized box-local
/// frame: rotation, translation, then uniform `1/max(size)` scaling for
/// positions; directions are rotated and renormalized.
pub fn world_to_object(
    x: &Vec3<f64>,
    d: &Vec3<f64>,
    pose_world_object: &SE3Pose,
    size: &Vec3<f64>,
) -> (Vec3<f64>, Vec3<f64>) {
    let inv_scale = 1.0 / size.0.iter().cloned().fold(f64::MIN, f64::max);
    let rt = pose_world_object.rotation.transpose();
    let x_local = rt.mul_vec(&(*x - pose_world_object.translation)).scale(inv_scale);
    let d_local = rt.mul_vec(d).normalized();
    (x_local, d_local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradStore, Tensor};
    use crate::geom::Mat3;
    use crate::lie::{se3_expmap, SE3Tangent};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> FieldConfig {
        FieldConfig {
            static_grid: HashGridConfig {
                num_levels: 3,
                base_resolution: 4,
                per_level_scale: 2.0,
                table_size_log2: 8,
                features_per_entry: 2,
            },
            proposal_grid: HashGridConfig {
                num_levels: 2,
                base_resolution: 4,
                per_level_scale: 2.0,
                table_size_log2: 7,
                features_per_entry: 1,
            },
            sigma_hidden: 16,
            geo_feat_dim: 7,
            color_hidden: 16,
            transient_hidden: 16,
            sh_degree: 4,
            psi_hidden: 16,
            psi_depth: 3,
            psi_skip: 2,
            psi_bottleneck: 8,
            psi_color_hidden: 16,
            pe_levels_pos: 4,
            pe_levels_dir: 2,
            proposal_hidden: 8,
        }
    }

    fn setup() -> (FieldSet, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let fs = FieldSet::init(small_config(), &mut store, &mut rng);
        (fs, store)
    }

    fn rows(rng: &mut ChaCha8Rng, n: usize, c: usize, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_vec(n, c, (0..n * c).map(|_| rng.gen_range(lo..hi)).collect())
    }

    #[test]
    fn mix_identities() {
        let (s, c) = mix(1.0, [0.2, 0.4, 0.6], 0.0, [1.0, 1.0, 1.0]);
        assert_eq!(s, 1.0);
        assert_eq!(c, [0.2, 0.4, 0.6]);
        let (s, c) = mix(0.0, [0.2, 0.4, 0.6], 2.0, [1.0, 0.5, 0.0]);
        assert_eq!(s, 2.0);
        assert_eq!(c, [1.0, 0.5, 0.0]);
        let (s, c) = mix(1.0, [1.0, 1.0, 1.0], 3.0, [0.0, 0.0, 0.0]);
        assert_eq!(s, 4.0);
        for v in c {
            assert!((v - 0.25).abs() < 1e-12);
        }
        // symmetry and convexity
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let sa = rng.gen_range(0.0..3.0);
            let sb = rng.gen_range(0.0..3.0);
            let ca = [rng.gen(), rng.gen(), rng.gen()];
            let cb = [rng.gen(), rng.gen(), rng.gen()];
            let (s1, c1) = mix(sa, ca, sb, cb);
            let (s2, c2) = mix(sb, cb, sa, ca);
            assert!((s1 - s2).abs() < 1e-12);
            if sa + sb >= 1e-8 {
                for i in 0..3 {
                    assert!((c1[i] - c2[i]).abs() < 1e-12);
                    assert!(c1[i] >= ca[i].min(cb[i]) - 1e-12);
                    assert!(c1[i] <= ca[i].max(cb[i]) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn equal_weight_blend_averages_colors() {
        let (s, c) = mix(0.7, [1.0, 0.0, 0.0], 0.7, [0.0, 1.0, 0.0]);
        assert!((s - 1.4).abs() < 1e-12);
        assert!((c[0] - 0.5).abs() < 1e-12);
        assert!((c[1] - 0.5).abs() < 1e-12);
        assert_eq!(c[2], 0.0);
    }

    #[test]
    fn world_to_object_cases() {
        let pose = SE3Pose::identity();
        let size = Vec3::new(2.0, 2.0, 2.0);
        let (x, _) = world_to_object(
            &Vec3::new(0.0, 0.0, 0.0),
            &Vec3::new(0.0, 0.0, 1.0),
            &pose,
            &size,
        );
        assert_eq!(x, Vec3::new(0.0, 0.0, 0.0));
        let (x, _) = world_to_object(
            &Vec3::new(1.0, 0.0, 0.0),
            &Vec3::new(0.0, 0.0, 1.0),
            &pose,
            &size,
        );
        assert_eq!(x, Vec3::new(0.5, 0.0, 0.0));
        // face point maps to (size_i/2)/max(size)
        let size = Vec3::new(1.0, 2.0, 4.0);
        let (x, _) = world_to_object(
            &Vec3::new(0.5, 0.0, 0.0),
            &Vec3::new(0.0, 0.0, 1.0),
            &pose,
            &size,
        );
        assert!((x.x() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn world_to_object_round_trip_and_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let tau = SE3Tangent::from_slice(&[
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let pose = se3_expmap(&tau);
            let size = Vec3::new(
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
            );
            let x = Vec3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let d1 = Vec3::new(1.0, 0.3, -0.2).normalized();
            let d2 = Vec3::new(-0.5, 1.0, 0.8).normalized();
            let (xl, dl1) = world_to_object(&x, &d1, &pose, &size);
            let (_, dl2) = world_to_object(&x, &d2, &pose, &size);
            // round trip
            let max_s = size.0.iter().cloned().fold(f64::MIN, f64::max);
            let back = pose.rotation.mul_vec(&xl.scale(max_s)) + pose.translation;
            assert!((back - x).norm() < 1e-6);
            // angle preservation
            let a_world = d1.dot(&d2).acos();
            let a_local = dl1.dot(&dl2).acos();
            assert!((a_world - a_local).abs() < 1e-9);
        }
    }

    #[test]
    fn static_query_blend_matches_scalar_formula() {
        let (fs, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new(&store);
        let x = tape.input(rows(&mut rng, 4, 3, -1.5, 1.5));
        let dirs = {
            let t = rows(&mut rng, 4, 3, -1.0, 1.0);
            let n = tape.input(t);
            tape.normalize_rows(n)
        };
        let app = tape.input(rows(&mut rng, 4, LATENT_DIM, -0.1, 0.1));
        let geo = tape.input(rows(&mut rng, 4, LATENT_DIM, -0.1, 0.1));
        let out = fs.static_query(&mut tape, x, dirs, app, geo);
        let sb = tape.values(out.sigma_base).to_vec();
        let st = tape.values(out.sigma_transient).to_vec();
        let sigma = tape.values(out.sigma).to_vec();
        for i in 0..4 {
            assert!((sigma[i] - (sb[i] + st[i])).abs() < 1e-12);
            assert!(sigma[i] >= 0.0);
        }
        let c = tape.values(out.color).to_vec();
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dynamic_query_head_structure() {
        let (fs, mut store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        // sigma ignores appearance codes entirely
        let x = rows(&mut rng, 3, 3, -0.4, 0.4);
        let d = rows(&mut rng, 3, 3, -1.0, 1.0);
        let sh = rows(&mut rng, 3, LATENT_DIM, -0.2, 0.2);
        let ap1 = rows(&mut rng, 3, LATENT_DIM, -0.2, 0.2);
        let ap2 = rows(&mut rng, 3, LATENT_DIM, -0.2, 0.2);
        let sq1 = rows(&mut rng, 3, LATENT_DIM, -0.2, 0.2);
        let sq2 = rows(&mut rng, 3, LATENT_DIM, -0.2, 0.2);
        let run = |store: &ParamStore<f64>, ap: &Tensor<f64>, sq: &Tensor<f64>| {
            let mut tape = Tape::new(store);
            let xn = tape.input(x.clone());
            let dn = tape.input(d.clone());
            let dn = tape.normalize_rows(dn);
            let shn = tape.input(sh.clone());
            let apn = tape.input(ap.clone());
            let sqn = tape.input(sq.clone());
            let (s, c) = fs.dynamic_query(&mut tape, xn, dn, shn, apn, sqn);
            (tape.values(s).to_vec(), tape.values(c).to_vec())
        };
        let (s1, c1) = run(&store, &ap1, &sq1);
        let (s2, c2) = run(&store, &ap2, &sq2);
        assert_eq!(s1, s2, "density must not see appearance codes");
        assert_ne!(c1, c2, "color must react to appearance codes");

        // two shape codes generally give different densities
        let mut tape = Tape::new(&store);
        let xn = tape.input(Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]));
        let dn = tape.input(Tensor::from_vec(2, 3, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        let sh2 = tape.input(rows(&mut rng, 2, LATENT_DIM, -0.5, 0.5));
        let ap = tape.input(Tensor::zeros(2, LATENT_DIM));
        let sq = tape.input(Tensor::zeros(2, LATENT_DIM));
        let (s, _) = fs.dynamic_query(&mut tape, xn, dn, sh2, ap, sq);
        let sv = tape.values(s);
        assert_ne!(sv[0], sv[1]);

        // zeroed color-head weights give a constant sigmoid(bias) color
        for l in 0..fs.psi_color.layers.len() {
            let wid = store.id_of(&format!("psi.color.w{l}")).unwrap();
            let n = store.get(wid).data.len();
            store.get_mut(wid).data = vec![0.0; n];
        }
        let (_, c) = run(&store, &ap1, &sq1);
        assert!((c[0] - 0.5).abs() < 1e-12);
        assert!(c.iter().all(|v| (*v - c[0]).abs() < 1e-12));
    }

    #[test]
    fn proposal_query_nonnegative_and_conditioned() {
        let (fs, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rows(&mut rng, 5, 3, -1.5, 1.5);
        let g1 = rows(&mut rng, 5, LATENT_DIM, -0.5, 0.5);
        let g2 = rows(&mut rng, 5, LATENT_DIM, -0.5, 0.5);
        for level in 0..2 {
            let mut tape = Tape::new(&store);
            let xn = tape.input(x.clone());
            let gn1 = tape.input(g1.clone());
            let gn2 = tape.input(g2.clone());
            let s1 = fs.proposal_query(&mut tape, xn, gn1, level);
            let s2 = fs.proposal_query(&mut tape, xn, gn2, level);
            let v1 = tape.values(s1).to_vec();
            let v2 = tape.values(s2).to_vec();
            assert!(v1.iter().all(|v| *v >= 0.0));
            assert_ne!(v1, v2, "geometry conditioning inactive at level {level}");
        }
    }

    #[test]
    fn full_pipeline_gradients_match_fd() {
        // flows through contract, hash grid, SH, both static heads, the
        // blend, and the dynamic field in 64-bit
        let (fs, mut store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rows(&mut rng, 5, 3, -1.2, 1.2);
        let draw = rows(&mut rng, 5, 3, -1.0, 1.0);
        let app = rows(&mut rng, 5, LATENT_DIM, -0.3, 0.3);
        let geo = rows(&mut rng, 5, LATENT_DIM, -0.3, 0.3);

        let forward = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new(store);
            let xn = tape.input(x.clone());
            let dn = tape.input(draw.clone());
            let dn = tape.normalize_rows(dn);
            let an = tape.input(app.clone());
            let gn = tape.input(geo.clone());
            let sq = fs.static_query(&mut tape, xn, dn, an, gn);
            let (ds, dc) = fs.dynamic_query(&mut tape, xn, dn, an, gn, an);
            let mixed = tape.color_blend(sq.sigma, sq.color, ds, dc);
            let s1 = tape.sum_all(mixed);
            let s2 = tape.sum_all(sq.sigma);
            let total = tape.add(s1, s2);
            tape.value_scalar(total)
        };

        // analytic grads
        let mut tape = Tape::new(&store);
        let xn = tape.input(x.clone());
        let dn = tape.input(draw.clone());
        let dn = tape.normalize_rows(dn);
        let an = tape.input(app.clone());
        let gn = tape.input(geo.clone());
        let sq = fs.static_query(&mut tape, xn, dn, an, gn);
        let (ds, dc) = fs.dynamic_query(&mut tape, xn, dn, an, gn, an);
        let mixed = tape.color_blend(sq.sigma, sq.color, ds, dc);
        let s1 = tape.sum_all(mixed);
        let s2 = tape.sum_all(sq.sigma);
        let total = tape.add(s1, s2);
        let mut grads = GradStore::new(&store);
        tape.backward(total, &mut grads).unwrap();
        let x_grad = tape.input_grad(xn).unwrap().to_vec();
        let param_grads: Vec<(String, Vec<f64>)> = store
            .iter()
            .filter_map(|(id, e)| grads.get(id).map(|g| (e.name.clone(), g.to_vec())))
            .collect();
        drop(tape);

        let rel = |a: f64, b: f64| (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()));
        // two-step central differences; coordinates where the two step
        // sizes disagree straddle a ReLU/contract kink and are skipped
        let fd_at = |f: &mut dyn FnMut(f64) -> f64, orig: f64| -> Option<f64> {
            let mut est = [0.0; 2];
            for (k, h) in [1e-5, 1e-6].iter().enumerate() {
                let fp = f(orig + h);
                let fm = f(orig - h);
                est[k] = (fp - fm) / (2.0 * h);
            }
            if rel(est[0], est[1]) < 1e-4 {
                Some(est[0])
            } else {
                None
            }
        };
        // positions
        let mut xp = x.clone();
        let mut checked = 0;
        for i in 0..xp.data.len() {
            let orig = xp.data[i];
            let fd = fd_at(
                &mut |v| {
                    xp.data[i] = v;
                    forward(&store, &xp)
                },
                orig,
            );
            xp.data[i] = orig;
            if let Some(fd) = fd {
                checked += 1;
                assert!(rel(x_grad[i], fd) < 1e-3, "x[{i}]: {} vs {}", x_grad[i], fd);
            }
        }
        assert!(checked > xp.data.len() / 2);
        // a parameter sample from each tensor
        for (name, g) in &param_grads {
            let pid = store.id_of(name).unwrap();
            let indices: Vec<usize> = if g.len() <= 4 {
                (0..g.len()).collect()
            } else {
                vec![0, g.len() / 2, g.len() - 1]
            };
            for &i in &indices {
                let orig = store.get(pid).data[i];
                let fd = fd_at(
                    &mut |v| {
                        store.get_mut(pid).data[i] = v;
                        forward(&store, &x)
                    },
                    orig,
                );
                store.get_mut(pid).data[i] = orig;
                if let Some(fd) = fd {
                    assert!(rel(g[i], fd) < 1e-3, "{name}[{i}]: {} vs {}", g[i], fd);
                }
            }
        }
    }
}
