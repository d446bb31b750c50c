//! Batched differentiable sampling and rendering.
//!
//! Proposal iterations run with detached sample positions and detached
//! dynamic densities, so their histogram weights are differentiable in the
//! proposal fields (and their conditioning) only. The final iteration
//! connects sample positions to ray-origin/direction leaves; pose-residual
//! gradients chain through per-ray and per-transform Jacobians captured
//! with dual numbers.

use super::{invert_cdf, ray_hits, Ray, SamplerConfig, SceneNorm, Spacing};
use crate::autodiff::{GradStore, NodeId, ParamId, ParamStore, Real, Tape, Tensor};
use crate::dual::Dual;
use crate::fields::{FieldSet, PSI_LOCAL_GUARD};
use crate::geom::{Mat3, Vec3};
use crate::graph::SceneGraph;
use crate::lie::{se3_expmap_generic, PoseG, SE3Pose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// How camera/object poses enter the batch.
#[derive(Clone, Copy, Debug)]
pub enum PoseMode {
    /// Recompute rays from the graph's residual-corrected poses and
    /// capture Jacobians w.r.t. the graph residuals.
    Train,
    /// Use rays as given; no pose gradients.
    Frozen,
    /// Refine a fresh per-frame residual on top of the frozen graph pose;
    /// Jacobians target `param[row]`.
    EvalResidual { param: ParamId, row: usize },
}

pub struct RenderSettings {
    pub sampler: SamplerConfig,
    pub pose_mode: PoseMode,
    /// Stratified jitter seed (training); `None` renders deterministic
    /// midpoints.
    pub jitter_seed: Option<u64>,
    /// Conditioning override: use this `(sequence, time)` latent
    /// everywhere instead of each ray's own.
    pub latent_override: Option<(usize, f64)>,
    /// Externally supplied quadrature edges in ray units, flat
    /// `rays * (n + 1)`; skips the sampling iterations.
    pub preset_edges_u: Option<Vec<f64>>,
}

impl RenderSettings {
    pub fn frozen(sampler: SamplerConfig) -> Self {
        RenderSettings {
            sampler,
            pose_mode: PoseMode::Frozen,
            jitter_seed: None,
            latent_override: None,
            preset_edges_u: None,
        }
    }
}

/// Histogram retained from one proposal iteration.
pub struct ProposalTrace {
    pub weights: NodeId,
    /// `rays * (bins + 1)` s-space edges.
    pub edges_s: Vec<f64>,
    pub bins: usize,
}

/// Per-transform-group pose leaf bookkeeping.
struct GroupBackprop {
    rot_leaf: NodeId,
    trans_leaf: NodeId,
    rot_jac: Option<[[[f64; 12]; 3]; 3]>,
    trans_jac: Option<[[f64; 12]; 3]>,
    /// Residual rows per lane block: `(param, row)` for lanes 0..6,
    /// 6..9, 9..12.
    targets: [Option<(ParamId, usize)>; 3],
}

struct RayBackprop {
    jac_o: [[f64; 6]; 3],
    jac_d: [[f64; 6]; 3],
    target: (ParamId, usize),
}

pub struct BatchNodes {
    pub num_rays: usize,
    pub n_final: usize,
    /// `[rays, 3]` rendered color.
    pub color: NodeId,
    /// `[rays, 1]` expected depth (weight-normalized).
    pub depth: NodeId,
    /// `[rays * n_final, 1]` rendering weights.
    pub weights: NodeId,
    /// `[rays, 1]` accumulated opacity.
    pub weight_sum: NodeId,
    /// `[rays * n_final, 1]` static and dynamic densities at final bins.
    pub sigma_static: NodeId,
    pub sigma_dynamic: NodeId,
    /// Bins that lie inside at least one box hit.
    pub bins_in_boxes: Vec<bool>,
    /// Final-bin s-space midpoints and widths.
    pub s_mid: Vec<f64>,
    pub s_delta: Vec<f64>,
    /// Final-bin s-space edges per ray (`rays * (n_final + 1)`).
    pub edges_s: Vec<f64>,
    /// Final-bin ray-distance evaluation points and bin widths.
    pub u_eval: Vec<f64>,
    pub delta_u: Vec<f64>,
    /// Detached static-only rendering weights over the final bins
    /// (the proposal-loss target).
    pub static_only_weights: Vec<f64>,
    pub proposals: Vec<ProposalTrace>,
    ray_bp: Vec<Option<RayBackprop>>,
    group_bp: Vec<GroupBackprop>,
    o_leaf: NodeId,
    d_leaf: NodeId,
}

/// Per-ray extraction of the spec's render output.
pub struct RayOutputs {
    pub color: [f64; 3],
    pub expected_depth: f64,
    pub weights: Vec<f64>,
    pub accumulated_opacity: f64,
    pub dynamic_weight_fraction: f64,
}

impl BatchNodes {
    pub fn extract<F: Real>(&self, tape: &Tape<F>, ray: usize) -> RayOutputs {
        let nf = self.n_final;
        let color_v = tape.values(self.color);
        let depth_v = tape.values(self.depth);
        let w = tape.values(self.weights);
        let ss = tape.values(self.sigma_static);
        let sd = tape.values(self.sigma_dynamic);
        let mut weights = Vec::with_capacity(nf);
        let mut opacity = 0.0;
        let mut dyn_frac = 0.0;
        for b in 0..nf {
            let i = ray * nf + b;
            let wi = w[i].f64();
            weights.push(wi);
            opacity += wi;
            let s_tot = ss[i].f64() + sd[i].f64();
            if s_tot > 1e-10 {
                dyn_frac += wi * sd[i].f64() / s_tot;
            }
        }
        RayOutputs {
            color: [
                color_v[ray * 3].f64(),
                color_v[ray * 3 + 1].f64(),
                color_v[ray * 3 + 2].f64(),
            ],
            expected_depth: depth_v[ray].f64(),
            weights,
            accumulated_opacity: opacity,
            dynamic_weight_fraction: dyn_frac,
        }
    }

    /// Chains ray-leaf and transform-leaf gradients into the pose
    /// residual parameters. Call after `tape.backward`.
    pub fn apply_pose_gradients<F: Real>(&self, tape: &Tape<F>, grads: &mut GradStore<F>) {
        if let Some(go) = tape.input_grad(self.o_leaf) {
            let gd = tape.input_grad(self.d_leaf).expect("d leaf grad");
            for (r, bp) in self.ray_bp.iter().enumerate() {
                let Some(bp) = bp else { continue };
                let (param, row) = bp.target;
                let numel = {
                    let e = tape.params().get(param);
                    e.rows * e.cols
                };
                let buf = grads.buffer_mut(param, numel);
                for lane in 0..6 {
                    let mut acc = 0.0f64;
                    for i in 0..3 {
                        acc += go[r * 3 + i].f64() * bp.jac_o[i][lane];
                        acc += gd[r * 3 + i].f64() * bp.jac_d[i][lane];
                    }
                    buf[row * 6 + lane] = buf[row * 6 + lane] + F::of(acc);
                }
            }
        }
        for g in &self.group_bp {
            let (Some(rj), Some(tj)) = (&g.rot_jac, &g.trans_jac) else {
                continue;
            };
            let grot = tape.input_grad(g.rot_leaf);
            let gtr = tape.input_grad(g.trans_leaf);
            if grot.is_none() && gtr.is_none() {
                continue;
            }
            for (block, target) in g.targets.iter().enumerate() {
                let Some((param, row)) = target else { continue };
                let lane_range = match block {
                    0 => 0..6,
                    1 => 6..9,
                    _ => 9..12,
                };
                let width = tape.params().get(*param).cols;
                let numel = {
                    let e = tape.params().get(*param);
                    e.rows * e.cols
                };
                let buf = grads.buffer_mut(*param, numel);
                for (k, lane) in lane_range.enumerate() {
                    let mut acc = 0.0f64;
                    if let Some(gr) = grot {
                        for i in 0..3 {
                            for j in 0..3 {
                                acc += gr[i * 3 + j].f64() * rj[i][j][lane];
                            }
                        }
                    }
                    if let Some(gt) = gtr {
                        for i in 0..3 {
                            acc += gt[i].f64() * tj[i][lane];
                        }
                    }
                    buf[row * width + k] = buf[row * width + k] + F::of(acc);
                }
            }
        }
    }
}

fn pose_leaf_values(pose: &PoseG<Dual<12>>) -> (Tensor<f64>, Tensor<f64>) {
    let mut rot = vec![0.0f64; 9];
    let mut tr = vec![0.0f64; 3];
    for i in 0..3 {
        tr[i] = pose.translation.0[i].re;
        for j in 0..3 {
            rot[i * 3 + j] = pose.rotation.0[i][j].re;
        }
    }
    (Tensor::from_vec(3, 3, rot), Tensor::from_vec(1, 3, tr))
}

fn pose_jacobians(pose: &PoseG<Dual<12>>) -> ([[[f64; 12]; 3]; 3], [[f64; 12]; 3]) {
    let mut rj = [[[0.0; 12]; 3]; 3];
    let mut tj = [[0.0; 12]; 3];
    for i in 0..3 {
        tj[i] = pose.translation.0[i].dx;
        for j in 0..3 {
            rj[i][j] = pose.rotation.0[i][j].dx;
        }
    }
    (rj, tj)
}

fn widen6(p: &PoseG<Dual<6>>) -> PoseG<Dual<12>> {
    let w = |d: &Dual<6>| {
        let mut out = Dual::<12>::constant(d.re);
        out.dx[..6].copy_from_slice(&d.dx);
        out
    };
    let mut rotation = Mat3::<Dual<12>>::zero();
    for i in 0..3 {
        for j in 0..3 {
            rotation.0[i][j] = w(&p.rotation.0[i][j]);
        }
    }
    PoseG {
        rotation,
        translation: Vec3::new(
            w(&p.translation.0[0]),
            w(&p.translation.0[1]),
            w(&p.translation.0[2]),
        ),
    }
}

fn residual_pose_dual<F: Real>(
    store: &ParamStore<F>,
    param: ParamId,
    row: usize,
    base: &SE3Pose,
) -> PoseG<Dual<6>> {
    let e = store.get(param);
    let r = e.row(row);
    let rho = Vec3::new(
        Dual::var(r[0].f64(), 0),
        Dual::var(r[1].f64(), 1),
        Dual::var(r[2].f64(), 2),
    );
    let phi = Vec3::new(
        Dual::var(r[3].f64(), 3),
        Dual::var(r[4].f64(), 4),
        Dual::var(r[5].f64(), 5),
    );
    se3_expmap_generic(rho, phi).compose(&base.lift())
}

/// Sampling and volumetric rendering of a ray batch on the given tape.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<'a, F: Real>(
    tape: &mut Tape<'a, F>,
    graph: &SceneGraph,
    fields: &FieldSet,
    store: &'a ParamStore<F>,
    rays: &[Ray],
    settings: &RenderSettings,
) -> BatchNodes {
    let nr = rays.len();
    assert!(nr > 0, "empty ray batch");
    let norm = SceneNorm::from_bounds(&graph.scene_bounds);
    let sampler = &settings.sampler;
    let spacing = Spacing::new(sampler.near, sampler.far, norm.radius());

    // ---- per-ray pose handling ----
    let mut origins = vec![0.0f64; nr * 3];
    let mut dirs = vec![0.0f64; nr * 3];
    let mut ray_bp: Vec<Option<RayBackprop>> = Vec::with_capacity(nr);
    // ego duals cached per (seq, ti): also reused for object transforms
    let mut ego_cache: HashMap<(usize, usize), PoseG<Dual<6>>> = HashMap::new();
    for (r, ray) in rays.iter().enumerate() {
        let (o, d, bp) = match settings.pose_mode {
            PoseMode::Frozen => (ray.origin, ray.dir, None),
            PoseMode::Train | PoseMode::EvalResidual { .. } => {
                let ti = graph.nearest_timestamp_index(ray.sequence, ray.time);
                let target = match settings.pose_mode {
                    PoseMode::Train => (graph.sequences[ray.sequence].residuals, ti),
                    PoseMode::EvalResidual { param, row } => (param, row),
                    PoseMode::Frozen => unreachable!(),
                };
                let ego = *ego_cache.entry((ray.sequence, ti)).or_insert_with(|| {
                    match settings.pose_mode {
                        PoseMode::Train => graph.refined_ego_pose_dual(store, ray.sequence, ti),
                        PoseMode::EvalResidual { param, row } => {
                            let base = graph.refined_ego_pose_at(store, ray.sequence, ti);
                            residual_pose_dual(store, param, row, &base)
                        }
                        PoseMode::Frozen => unreachable!(),
                    }
                });
                let cam = &graph.cameras[ray.camera];
                let o_dual = ego
                    .rotation
                    .mul_vec(&cam.extrinsic.translation.lift::<Dual<6>>())
                    + ego.translation;
                let p = Vec3::new(ray.pixel.0 as f64 + 0.5, ray.pixel.1 as f64 + 0.5, 1.0);
                let v_cam = cam.extrinsic.rotation.mul_vec(&cam.intrinsics_inv.mul_vec(&p));
                let d_dual = ego.rotation.mul_vec(&v_cam.lift::<Dual<6>>()).normalized();
                let mut jac_o = [[0.0; 6]; 3];
                let mut jac_d = [[0.0; 6]; 3];
                for i in 0..3 {
                    jac_o[i] = o_dual.0[i].dx;
                    jac_d[i] = d_dual.0[i].dx;
                }
                (
                    o_dual.map_f64(),
                    d_dual.map_f64(),
                    Some(RayBackprop {
                        jac_o,
                        jac_d,
                        target,
                    }),
                )
            }
        };
        origins[r * 3..r * 3 + 3].copy_from_slice(&o.0);
        dirs[r * 3..r * 3 + 3].copy_from_slice(&d.0);
        ray_bp.push(bp);
    }
    let o_leaf = tape.input(Tensor::from_f64s(nr, 3, &origins));
    let d_leaf = tape.input(Tensor::from_f64s(nr, 3, &dirs));

    // ---- latent conditioning: per-ray appearance/geometry code rows ----
    let (app_rows, geo_rows) = build_latent_rows(tape, graph, rays, settings);

    // ---- box hits and transform groups ----
    let mut hits_per_ray = Vec::with_capacity(nr);
    let mut groups: Vec<TransformGroup> = Vec::new();
    let mut group_index: HashMap<(usize, u64, usize), usize> = HashMap::new();
    for ray in rays {
        let hits = ray_hits(graph, store, ray);
        for h in &hits {
            let key = (ray.sequence, ray.time.to_bits(), h.object);
            if !group_index.contains_key(&key) {
                group_index.insert(key, groups.len());
                groups.push(build_group(graph, store, h.object, ray, settings));
            }
        }
        hits_per_ray.push(hits);
    }

    // ---- sampling ----
    let mut rng_for = |salt: u64, r: usize| {
        settings
            .jitter_seed
            .map(|s| ChaCha8Rng::seed_from_u64(s ^ salt.wrapping_mul(0x9e3779b97f4a7c15) ^ (r as u64)))
    };

    let (final_edges_s, proposals) = if let Some(preset) = &settings.preset_edges_u {
        assert_eq!(preset.len() % nr, 0, "preset edge count");
        (preset.iter().map(|u| spacing.s_of_u(*u)).collect(), Vec::new())
    } else if let Some(n) = sampler.dense_uniform {
        let mut edges = Vec::with_capacity(nr * (n + 1));
        for _ in 0..nr {
            for j in 0..=n {
                edges.push(j as f64 / n as f64);
            }
        }
        (edges, Vec::new())
    } else {
        let mut prop_traces = Vec::new();
        // iteration 0: uniform bins in s-space
        let n0 = sampler.n_initial;
        let mut edges0 = Vec::with_capacity(nr * (n0 + 1));
        for _ in 0..nr {
            for j in 0..=n0 {
                edges0.push(j as f64 / n0 as f64);
            }
        }
        let w0 = proposal_weights(
            tape, graph, fields, store, rays, &origins, &dirs, &hits_per_ray, &groups,
            &group_index, &edges0, n0, 0, &spacing, &norm, geo_rows, &mut rng_for,
        );
        let edges1 = resample(tape, &edges0, w0, n0, sampler.n_refined, nr, &mut rng_for, 1);
        prop_traces.push(ProposalTrace {
            weights: w0,
            edges_s: edges0,
            bins: n0,
        });
        let n1 = sampler.n_refined;
        let w1 = proposal_weights(
            tape, graph, fields, store, rays, &origins, &dirs, &hits_per_ray, &groups,
            &group_index, &edges1, n1, 1, &spacing, &norm, geo_rows, &mut rng_for,
        );
        let final_edges = resample(tape, &edges1, w1, n1, sampler.n_final, nr, &mut rng_for, 2);
        prop_traces.push(ProposalTrace {
            weights: w1,
            edges_s: edges1,
            bins: n1,
        });
        (final_edges, prop_traces)
    };
    let nf = if let Some(preset) = &settings.preset_edges_u {
        preset.len() / nr - 1
    } else {
        sampler.dense_uniform.unwrap_or(sampler.n_final)
    };

    // evaluation points within final bins
    let mut u_eval = Vec::with_capacity(nr * nf);
    let mut delta_u = Vec::with_capacity(nr * nf);
    let mut s_mid = Vec::with_capacity(nr * nf);
    let mut s_delta = Vec::with_capacity(nr * nf);
    for r in 0..nr {
        let mut rng = rng_for(3, r);
        for b in 0..nf {
            let slo = final_edges_s[r * (nf + 1) + b];
            let shi = final_edges_s[r * (nf + 1) + b + 1];
            let (ulo, uhi) = match &settings.preset_edges_u {
                Some(p) => (p[r * (nf + 1) + b], p[r * (nf + 1) + b + 1]),
                None => (spacing.u_of_s(slo), spacing.u_of_s(shi)),
            };
            let frac = rng.as_mut().map_or(0.5, |g| g.gen_range(0.0..1.0));
            u_eval.push(ulo + frac * (uhi - ulo).max(0.0));
            delta_u.push((uhi - ulo).max(1e-12));
            s_mid.push(0.5 * (slo + shi));
            s_delta.push((shi - slo).max(1e-12));
        }
    }

    // ---- final render ----
    let bin2ray: Arc<Vec<u32>> = Arc::new(
        (0..nr)
            .flat_map(|r| std::iter::repeat(r as u32).take(nf))
            .collect(),
    );
    let o_bins = tape.gather_rows(o_leaf, bin2ray.clone());
    let d_bins = tape.gather_rows(d_leaf, bin2ray.clone());
    let u_col = tape.constant(Tensor::from_f64s(nr * nf, 1, &u_eval));
    let step = tape.mul_col_vec(d_bins, u_col);
    let x_world = tape.add(o_bins, step);
    let neg_center = tape.constant(Tensor::from_f64s(
        1,
        3,
        &[-norm.center.x(), -norm.center.y(), -norm.center.z()],
    ));
    let x_shift = tape.add_row_vec(x_world, neg_center);
    let x_norm = tape.affine(x_shift, norm.inv_radius, 0.0);

    let d_unit = tape.normalize_rows(d_bins);
    let app_bins = tape.gather_rows(app_rows, bin2ray.clone());
    let geo_bins = tape.gather_rows(geo_rows, bin2ray.clone());
    let sq = fields.static_query(tape, x_norm, d_unit, app_bins, geo_bins);

    // dynamic pairs at final bins
    let mut bins_in_boxes = vec![false; nr * nf];
    let pairs = collect_pairs(
        rays, &hits_per_ray, &group_index, &groups, &u_eval, nf, &origins, &dirs,
        &mut bins_in_boxes,
    );
    let mut group_bp: Vec<GroupBackprop> = Vec::new();
    let (sigma_dyn, color_dyn_weighted) = if pairs.is_empty() {
        (None, None)
    } else {
        let mut sigma_parts = Vec::new();
        let mut color_parts = Vec::new();
        // pairs are grouped by transform group
        let mut by_group: HashMap<usize, Vec<&Pair>> = HashMap::new();
        for p in &pairs {
            by_group.entry(p.group).or_default().push(p);
        }
        let mut group_ids: Vec<usize> = by_group.keys().copied().collect();
        group_ids.sort_unstable();
        for gid in group_ids {
            let plist = &by_group[&gid];
            let grp = &groups[gid];
            let rows_bins: Arc<Vec<u32>> =
                Arc::new(plist.iter().map(|p| p.bin as u32).collect());
            let rows_rays: Arc<Vec<u32>> =
                Arc::new(plist.iter().map(|p| (p.bin / nf) as u32).collect());
            let obj_rows: Arc<Vec<u32>> =
                Arc::new(vec![grp.object as u32; plist.len()]);

            let rot_leaf = tape.input(Tensor::from_f64s(3, 3, &grp.rot_leaf_vals.data));
            let trans_leaf = tape.input(Tensor::from_f64s(1, 3, &grp.trans_leaf_vals.data));
            let x_g = tape.gather_rows(x_world, rows_bins.clone());
            let neg_t = tape.affine(trans_leaf, -1.0, 0.0);
            let x_c = tape.add_row_vec(x_g, neg_t);
            let x_r = tape.matmul(x_c, rot_leaf);
            let x_local = tape.affine(x_r, grp.inv_scale, 0.0);
            let d_g = tape.gather_rows(d_unit, rows_bins.clone());
            let d_r = tape.matmul(d_g, rot_leaf);
            let d_local = tape.normalize_rows(d_r);

            let shape = tape.gather_param_rows(graph.object_shape_codes, obj_rows.clone());
            let appc = tape.gather_param_rows(graph.object_appearance_codes, obj_rows);
            let seq_app = tape.gather_rows(app_rows, rows_rays);
            let (s_psi, c_psi) =
                fields.dynamic_query(tape, x_local, d_local, shape, appc, seq_app);
            let cw = tape.mul_col_vec(c_psi, s_psi);
            sigma_parts.push(tape.scatter_add_rows(s_psi, rows_bins.clone(), nr * nf));
            color_parts.push(tape.scatter_add_rows(cw, rows_bins, nr * nf));
            group_bp.push(GroupBackprop {
                rot_leaf,
                trans_leaf,
                rot_jac: grp.rot_jac,
                trans_jac: grp.trans_jac,
                targets: grp.targets,
            });
        }
        let mut s_acc = sigma_parts[0];
        let mut c_acc = color_parts[0];
        for i in 1..sigma_parts.len() {
            s_acc = tape.add(s_acc, sigma_parts[i]);
            c_acc = tape.add(c_acc, color_parts[i]);
        }
        (Some(s_acc), Some(c_acc))
    };

    let (sigma, color) = match (sigma_dyn, color_dyn_weighted) {
        (Some(sd), Some(cw)) => {
            let denom = tape.affine(sd, 1.0, 1e-12);
            let denom3 = broadcast_col3(tape, denom);
            let c_dyn = tape.div(cw, denom3);
            let sigma = tape.add(sq.sigma, sd);
            let color = tape.color_blend(sq.sigma, sq.color, sd, c_dyn);
            (sigma, color)
        }
        _ => (sq.sigma, sq.color),
    };
    let sigma_dynamic = match sigma_dyn {
        Some(sd) => sd,
        None => tape.constant(Tensor::zeros(nr * nf, 1)),
    };

    // transmittance quadrature
    let delta_col = tape.constant(Tensor::from_f64s(nr * nf, 1, &delta_u));
    let sigma_delta = tape.mul(sigma, delta_col);
    let accum = tape.seg_cumsum_excl(sigma_delta, nf);
    let neg_accum = tape.affine(accum, -1.0, 0.0);
    let transmittance = tape.exp(neg_accum);
    let neg_sd = tape.affine(sigma_delta, -1.0, 0.0);
    let exp_sd = tape.exp(neg_sd);
    let alpha = tape.affine(exp_sd, -1.0, 1.0);
    let weights = tape.mul(transmittance, alpha);

    let cw = tape.mul_col_vec(color, weights);
    let color_out = tape.seg_sum(cw, nf);
    let weight_sum = tape.seg_sum(weights, nf);
    let wu = tape.mul(weights, u_col);
    let wu_sum = tape.seg_sum(wu, nf);
    let denom = tape.affine(weight_sum, 1.0, 1e-6);
    let depth = tape.div(wu_sum, denom);

    // detached static-only weights over the final bins (proposal target)
    let static_only_weights = {
        let ss = tape.values(sq.sigma);
        let mut out = vec![0.0f64; nr * nf];
        for r in 0..nr {
            let mut acc = 0.0f64;
            for b in 0..nf {
                let i = r * nf + b;
                let sd_ = ss[i].f64() * delta_u[i];
                let t = (-acc).exp();
                out[i] = t * (1.0 - (-sd_).exp());
                acc += sd_;
            }
        }
        out
    };

    BatchNodes {
        num_rays: nr,
        n_final: nf,
        color: color_out,
        depth,
        weights,
        weight_sum,
        sigma_static: sq.sigma,
        sigma_dynamic,
        bins_in_boxes,
        s_mid,
        s_delta,
        edges_s: final_edges_s,
        u_eval,
        delta_u,
        static_only_weights,
        proposals,
        ray_bp,
        group_bp,
        o_leaf,
        d_leaf,
    }
}

fn broadcast_col3<F: Real>(tape: &mut Tape<F>, col: NodeId) -> NodeId {
    // [N,1] -> [N,3] by concatenation
    tape.concat_cols(&[col, col, col])
}

/// Per-ray `[R, LATENT_DIM]` appearance and geometry code nodes,
/// differentiable into the per-sequence latent matrices.
fn build_latent_rows<F: Real>(
    tape: &mut Tape<F>,
    graph: &SceneGraph,
    rays: &[Ray],
    settings: &RenderSettings,
) -> (NodeId, NodeId) {
    let nr = rays.len();
    let basis_dim = graph.fourier.output_dim();
    // group rays by conditioning sequence
    let mut by_seq: HashMap<usize, Vec<usize>> = HashMap::new();
    for (r, ray) in rays.iter().enumerate() {
        let seq = settings.latent_override.map_or(ray.sequence, |(s, _)| s);
        by_seq.entry(seq).or_default().push(r);
    }
    let mut seqs: Vec<usize> = by_seq.keys().copied().collect();
    seqs.sort_unstable();
    let mut app_parts = Vec::new();
    let mut geo_parts = Vec::new();
    for seq in seqs {
        let ray_ids = &by_seq[&seq];
        let mut basis = Vec::with_capacity(ray_ids.len() * basis_dim);
        for &r in ray_ids {
            let t = settings.latent_override.map_or(rays[r].time, |(_, t)| t);
            basis.extend_from_slice(&graph.basis_at(seq, t));
        }
        let basis_node = tape.constant(Tensor::from_f64s(ray_ids.len(), basis_dim, &basis));
        let a = tape.param(graph.latents.appearance[seq]);
        let g = tape.param(graph.latents.geometry[seq]);
        let app = tape.matmul(basis_node, a);
        let geo = tape.matmul(basis_node, g);
        let dst: Arc<Vec<u32>> = Arc::new(ray_ids.iter().map(|r| *r as u32).collect());
        app_parts.push(tape.scatter_add_rows(app, dst.clone(), nr));
        geo_parts.push(tape.scatter_add_rows(geo, dst, nr));
    }
    let mut app = app_parts[0];
    let mut geo = geo_parts[0];
    for i in 1..app_parts.len() {
        app = tape.add(app, app_parts[i]);
        geo = tape.add(geo, geo_parts[i]);
    }
    (app, geo)
}

struct TransformGroup {
    object: usize,
    rot_leaf_vals: Tensor<f64>,
    trans_leaf_vals: Tensor<f64>,
    inv_scale: f64,
    rot_f64: Mat3<f64>,
    trans_f64: Vec3<f64>,
    rot_jac: Option<[[[f64; 12]; 3]; 3]>,
    trans_jac: Option<[[f64; 12]; 3]>,
    targets: [Option<(ParamId, usize)>; 3],
}

fn build_group<F: Real>(
    graph: &SceneGraph,
    store: &ParamStore<F>,
    object: usize,
    ray: &Ray,
    settings: &RenderSettings,
) -> TransformGroup {
    let size = graph.objects[object].size;
    let inv_scale = 1.0 / size.0.iter().cloned().fold(f64::MIN, f64::max);
    match settings.pose_mode {
        PoseMode::Frozen => {
            let pose = graph
                .object_pose_world(store, object, ray.time)
                .expect("object from hits");
            let (rot_t, trans_t) = plain_pose_tensors(&pose);
            TransformGroup {
                object,
                rot_leaf_vals: rot_t,
                trans_leaf_vals: trans_t,
                inv_scale,
                rot_f64: pose.rotation,
                trans_f64: pose.translation,
                rot_jac: None,
                trans_jac: None,
                targets: [None, None, None],
            }
        }
        PoseMode::Train => {
            let dual = graph.object_pose_world_dual(store, object, ray.time);
            let (rot_t, trans_t) = pose_leaf_values(&dual.pose);
            let (rj, tj) = pose_jacobians(&dual.pose);
            let seq = dual.sequence;
            let dp = graph.sequences[seq].residuals;
            let dxi = graph.objects[object].residuals;
            TransformGroup {
                object,
                rot_f64: dual.pose.rotation.map_f64(),
                trans_f64: dual.pose.translation.map_f64(),
                rot_leaf_vals: rot_t,
                trans_leaf_vals: trans_t,
                inv_scale,
                rot_jac: Some(rj),
                trans_jac: Some(tj),
                targets: [
                    Some((dp, dual.ego_ti)),
                    Some((dxi, dual.key_a)),
                    if dual.key_b != dual.key_a {
                        Some((dxi, dual.key_b))
                    } else {
                        None
                    },
                ],
            }
        }
        PoseMode::EvalResidual { param, row } => {
            let frozen = graph
                .object_pose_world(store, object, ray.time)
                .expect("object from hits");
            let dual6 = residual_pose_dual(store, param, row, &frozen);
            let dual = widen6(&dual6);
            let (rot_t, trans_t) = pose_leaf_values(&dual);
            let (rj, tj) = pose_jacobians(&dual);
            TransformGroup {
                object,
                rot_f64: dual.rotation.map_f64(),
                trans_f64: dual.translation.map_f64(),
                rot_leaf_vals: rot_t,
                trans_leaf_vals: trans_t,
                inv_scale,
                rot_jac: Some(rj),
                trans_jac: Some(tj),
                targets: [Some((param, row)), None, None],
            }
        }
    }
}

fn plain_pose_tensors(pose: &SE3Pose) -> (Tensor<f64>, Tensor<f64>) {
    let mut rot = vec![0.0f64; 9];
    for i in 0..3 {
        for j in 0..3 {
            rot[i * 3 + j] = pose.rotation.0[i][j];
        }
    }
    (
        Tensor::from_vec(3, 3, rot),
        Tensor::from_vec(1, 3, pose.translation.0.to_vec()),
    )
}

struct Pair {
    bin: usize,
    group: usize,
}

/// Final-bin (bin, transform-group) pairs whose evaluation point falls
/// inside the hit interval and the box-local guard.
#[allow(clippy::too_many_arguments)]
fn collect_pairs(
    rays: &[Ray],
    hits_per_ray: &[Vec<super::BoxHit>],
    group_index: &HashMap<(usize, u64, usize), usize>,
    groups: &[TransformGroup],
    u_eval: &[f64],
    nf: usize,
    origins: &[f64],
    dirs: &[f64],
    bins_in_boxes: &mut [bool],
) -> Vec<Pair> {
    let mut pairs = Vec::new();
    for (r, ray) in rays.iter().enumerate() {
        for h in &hits_per_ray[r] {
            let gid = group_index[&(ray.sequence, ray.time.to_bits(), h.object)];
            let grp = &groups[gid];
            for b in 0..nf {
                let i = r * nf + b;
                let u = u_eval[i];
                if u < h.u_in || u > h.u_out {
                    continue;
                }
                bins_in_boxes[i] = true;
                // guard in box-local coordinates
                let x = Vec3::new(
                    origins[r * 3] + u * dirs[r * 3],
                    origins[r * 3 + 1] + u * dirs[r * 3 + 1],
                    origins[r * 3 + 2] + u * dirs[r * 3 + 2],
                );
                let local = grp
                    .rot_f64
                    .transpose()
                    .mul_vec(&(x - grp.trans_f64))
                    .scale(grp.inv_scale);
                if local.norm_inf_value() <= PSI_LOCAL_GUARD {
                    pairs.push(Pair { bin: i, group: gid });
                }
            }
        }
    }
    pairs
}

/// One proposal iteration: evaluates the proposal field (on-tape) plus the
/// detached dynamic density inside box hits, and returns the histogram
/// weight node `[rays * bins, 1]`.
#[allow(clippy::too_many_arguments)]
fn proposal_weights<'a, F: Real>(
    tape: &mut Tape<'a, F>,
    graph: &SceneGraph,
    fields: &FieldSet,
    store: &'a ParamStore<F>,
    rays: &[Ray],
    origins: &[f64],
    dirs: &[f64],
    hits_per_ray: &[Vec<super::BoxHit>],
    groups: &[TransformGroup],
    group_index: &HashMap<(usize, u64, usize), usize>,
    edges_s: &[f64],
    bins: usize,
    level: usize,
    spacing: &Spacing,
    norm: &SceneNorm,
    geo_rows: NodeId,
    rng_for: &mut impl FnMut(u64, usize) -> Option<ChaCha8Rng>,
) -> NodeId {
    let nr = rays.len();
    let n = bins;
    let mut u_eval = Vec::with_capacity(nr * n);
    let mut delta_u = Vec::with_capacity(nr * n);
    for r in 0..nr {
        let mut rng = rng_for(10 + level as u64, r);
        for b in 0..n {
            let slo = edges_s[r * (n + 1) + b];
            let shi = edges_s[r * (n + 1) + b + 1];
            let ulo = spacing.u_of_s(slo);
            let uhi = spacing.u_of_s(shi);
            let frac = rng.as_mut().map_or(0.5, |g| g.gen_range(0.0..1.0));
            let u = ulo + frac * (uhi - ulo).max(0.0);
            u_eval.push(u);
            delta_u.push((uhi - ulo).max(1e-12));
        }
    }
    // positions are detached in proposal iterations
    let mut x_pts = Vec::with_capacity(nr * n * 3);
    for r in 0..nr {
        for b in 0..n {
            let u = u_eval[r * n + b];
            let x = Vec3::new(
                origins[r * 3] + u * dirs[r * 3],
                origins[r * 3 + 1] + u * dirs[r * 3 + 1],
                origins[r * 3 + 2] + u * dirs[r * 3 + 2],
            );
            let xn = norm.normalize(&x);
            x_pts.extend_from_slice(&xn.0);
        }
    }
    let x_node = tape.constant(Tensor::from_f64s(nr * n, 3, &x_pts));
    let bin2ray: Arc<Vec<u32>> = Arc::new(
        (0..nr)
            .flat_map(|r| std::iter::repeat(r as u32).take(n))
            .collect(),
    );
    let geo_bins = tape.gather_rows(geo_rows, bin2ray);
    let sigma_prop = fields.proposal_query(tape, x_node, geo_bins, level);

    // detached dynamic density inside hits
    let mut dyn_sigma = vec![0.0f64; nr * n];
    {
        let mut pts = Vec::new(); // (flat idx, group, x_local)
        for (r, ray) in rays.iter().enumerate() {
            for h in &hits_per_ray[r] {
                let gid = group_index[&(ray.sequence, ray.time.to_bits(), h.object)];
                let grp = &groups[gid];
                for b in 0..n {
                    let u = u_eval[r * n + b];
                    if u < h.u_in || u > h.u_out {
                        continue;
                    }
                    let x = Vec3::new(
                        origins[r * 3] + u * dirs[r * 3],
                        origins[r * 3 + 1] + u * dirs[r * 3 + 1],
                        origins[r * 3 + 2] + u * dirs[r * 3 + 2],
                    );
                    let local = grp
                        .rot_f64
                        .transpose()
                        .mul_vec(&(x - grp.trans_f64))
                        .scale(grp.inv_scale);
                    if local.norm_inf_value() <= PSI_LOCAL_GUARD {
                        pts.push((r * n + b, gid, local));
                    }
                }
            }
        }
        if !pts.is_empty() {
            let mut scratch = Tape::new(store);
            let xs: Vec<f64> = pts.iter().flat_map(|(_, _, l)| l.0).collect();
            let x_local = scratch.constant(Tensor::from_f64s(pts.len(), 3, &xs));
            let obj_rows: Arc<Vec<u32>> = Arc::new(
                pts.iter().map(|(_, g, _)| groups[*g].object as u32).collect(),
            );
            let shape = scratch.gather_param_rows(graph.object_shape_codes, obj_rows);
            let s_psi = fields.dynamic_density(&mut scratch, x_local, shape);
            let vals = scratch.values(s_psi);
            for (k, (idx, _, _)) in pts.iter().enumerate() {
                dyn_sigma[*idx] += vals[k].f64();
            }
        }
    }
    let dyn_node = tape.constant(Tensor::from_f64s(nr * n, 1, &dyn_sigma));
    let sigma_mix = tape.add(sigma_prop, dyn_node);
    let delta_col = tape.constant(Tensor::from_f64s(nr * n, 1, &delta_u));
    let sigma_delta = tape.mul(sigma_mix, delta_col);
    let accum = tape.seg_cumsum_excl(sigma_delta, n);
    let neg_accum = tape.affine(accum, -1.0, 0.0);
    let transmittance = tape.exp(neg_accum);
    let neg_sd = tape.affine(sigma_delta, -1.0, 0.0);
    let exp_sd = tape.exp(neg_sd);
    let alpha = tape.affine(exp_sd, -1.0, 1.0);
    tape.mul(transmittance, alpha)
}

/// Inverse-transform resampling of per-ray histograms into `m` new bins.
fn resample<F: Real>(
    tape: &Tape<F>,
    edges_s: &[f64],
    weights: NodeId,
    bins: usize,
    m: usize,
    nr: usize,
    rng_for: &mut impl FnMut(u64, usize) -> Option<ChaCha8Rng>,
    salt: u64,
) -> Vec<f64> {
    let w = tape.values(weights);
    let mut out = Vec::with_capacity(nr * (m + 1));
    for r in 0..nr {
        let mut rng = rng_for(20 + salt, r);
        let e = &edges_s[r * (bins + 1)..(r + 1) * (bins + 1)];
        let wr: Vec<f64> = (0..bins).map(|b| w[r * bins + b].f64()).collect();
        let quantiles: Vec<f64> = match rng.as_mut() {
            Some(g) => {
                let zeta: f64 = g.gen_range(0.0..1.0);
                (0..=m).map(|j| (j as f64 + zeta) / (m as f64 + 1.0)).collect()
            }
            None => (0..=m).map(|j| j as f64 / m as f64).collect(),
        };
        out.extend(invert_cdf(e, &wr, &quantiles, 1e-3));
    }
    out
}
