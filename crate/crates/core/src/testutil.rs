//! Shared fixtures for integration-style unit tests: tiny manifests and
//! parameter surgery that pins fields to known constant outputs.

use crate::autodiff::{ParamStore, Real};
use crate::data::manifest::*;
use crate::encoding::HashGridConfig;
use crate::fields::{FieldConfig, FieldSet};
use crate::geom::{Aabb, Mat3, Vec3};
use crate::graph::SceneGraph;
use crate::lie::SE3Pose;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_field_config() -> FieldConfig {
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

pub fn one_sequence_manifest(with_object: bool) -> DatasetManifest {
    DatasetManifest {
        version: MANIFEST_VERSION,
        scene_bounds: Aabb {
            min: Vec3::new(-20.0, -20.0, -2.0),
            max: Vec3::new(20.0, 20.0, 10.0),
        },
        max_sequence_length: 2.0,
        cameras: vec![CameraSpec {
            id: "cam0".into(),
            intrinsics: Mat3([[8.0, 0.0, 4.0], [0.0, 8.0, 4.0], [0.0, 0.0, 1.0]]),
            extrinsic: SE3Pose::identity(),
            width: 8,
            height: 8,
            mask: None,
        }],
        sequences: vec![SequenceSpec {
            id: "seq0".into(),
            timestamps: vec![0.0, 1.0],
            ego_poses: vec![SE3Pose::identity(), SE3Pose::identity()],
        }],
        frames: vec![],
        objects: if with_object {
            vec![ObjectSpec {
                id: "obj0".into(),
                sequence: "seq0".into(),
                size: Vec3::new(2.0, 2.0, 2.0),
                track: vec![
                    TrackPoint {
                        timestamp: 0.0,
                        pose: SE3Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 6.0)),
                    },
                    TrackPoint {
                        timestamp: 1.0,
                        pose: SE3Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 6.0)),
                    },
                ],
            }]
        } else {
            vec![]
        },
    }
}

pub fn build_scene<F: Real>(
    manifest: &DatasetManifest,
    seed: u64,
) -> (SceneGraph, FieldSet, ParamStore<F>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = SceneGraph::build(manifest, None, &mut store, &mut rng).unwrap();
    let fields = FieldSet::init(small_field_config(), &mut store, &mut rng);
    (graph, fields, store)
}

pub fn zero_param<F: Real>(store: &mut ParamStore<F>, name: &str) {
    let id = store.id_of(name).expect(name);
    let e = store.get_mut(id);
    e.data.iter_mut().for_each(|v| *v = F::zero());
}

pub fn set_param_value<F: Real>(store: &mut ParamStore<F>, name: &str, idx: usize, v: f64) {
    let id = store.id_of(name).expect(name);
    store.get_mut(id).data[idx] = F::of(v);
}

/// `softplus(x) = s` inverse.
pub fn inv_softplus(s: f64) -> f64 {
    s.exp_m1().ln()
}

/// `sigmoid(x) = p` inverse.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Pins the static field to constant density `sigma` and constant color
/// `rgb`, with the transient head effectively off.
pub fn make_static_constant<F: Real>(store: &mut ParamStore<F>, cfg: &FieldConfig, sigma: f64, rgb: [f64; 3]) {
    zero_param(store, "phi.grid");
    zero_param(store, "phi.sigma.w0");
    zero_param(store, "phi.sigma.b0");
    zero_param(store, "phi.sigma.w1");
    zero_param(store, "phi.sigma.b1");
    set_param_value(store, "phi.sigma.b1", cfg.geo_feat_dim, inv_softplus(sigma.max(1e-30)));
    for l in 0..3 {
        zero_param(store, &format!("phi.color.w{l}"));
        zero_param(store, &format!("phi.color.b{l}"));
    }
    for (c, v) in rgb.iter().enumerate() {
        set_param_value(store, "phi.color.b2", c, logit(v.clamp(1e-6, 1.0 - 1e-6)));
    }
    for l in 0..3 {
        zero_param(store, &format!("phi.transient.w{l}"));
        zero_param(store, &format!("phi.transient.b{l}"));
    }
    // transient density pinned to ~0
    set_param_value(store, "phi.transient.b2", 0, -60.0);
}

/// Pins the dynamic field to constant density/color.
pub fn make_dynamic_constant<F: Real>(store: &mut ParamStore<F>, cfg: &FieldConfig, sigma: f64, rgb: [f64; 3]) {
    for l in 0..cfg.psi_depth {
        zero_param(store, &format!("psi.trunk.w{l}"));
        zero_param(store, &format!("psi.trunk.b{l}"));
    }
    zero_param(store, "psi.head.w0");
    zero_param(store, "psi.head.b0");
    set_param_value(store, "psi.head.b0", cfg.psi_bottleneck, inv_softplus(sigma.max(1e-30)));
    for l in 0..2 {
        zero_param(store, &format!("psi.color.w{l}"));
        zero_param(store, &format!("psi.color.b{l}"));
    }
    for (c, v) in rgb.iter().enumerate() {
        set_param_value(store, "psi.color.b1", c, logit(v.clamp(1e-6, 1.0 - 1e-6)));
    }
}

/// Pins both proposal fields to constant density.
pub fn make_proposals_constant<F: Real>(store: &mut ParamStore<F>, sigma: f64) {
    for i in 0..2 {
        zero_param(store, &format!("prop{i}.grid"));
        zero_param(store, &format!("prop{i}.head.w0"));
        zero_param(store, &format!("prop{i}.head.b0"));
        zero_param(store, &format!("prop{i}.head.w1"));
        zero_param(store, &format!("prop{i}.head.b1"));
        set_param_value(store, &format!("prop{i}.head.b1"), 0, inv_softplus(sigma.max(1e-30)));
    }
}
