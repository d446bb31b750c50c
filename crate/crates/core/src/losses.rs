//! Training losses: photometric, expected-depth, dynamic/static entropy
//! separation, distortion, and the proposal histogram loss, plus their
//! weighted total. All losses are means over the ray batch.

use crate::autodiff::{NodeId, Real, Tape, Tensor};
use crate::render::{BatchNodes, ProposalTrace};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub dist: f64,
    pub prop: f64,
    pub dep: f64,
    pub entr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dist: 0.002,
            prop: 1.0,
            dep: 0.05,
            entr: 0.0001,
        }
    }
}

pub struct LossNodes {
    pub rgb: NodeId,
    pub dist: NodeId,
    pub prop: NodeId,
    pub dep: NodeId,
    pub entr: NodeId,
    pub total: NodeId,
}

/// Squared L2 color error summed over channels, mean over rays.
pub fn loss_rgb<F: Real>(tape: &mut Tape<F>, color: NodeId, gt: &[f64]) -> NodeId {
    let r = tape.rows(color);
    assert_eq!(gt.len(), r * 3);
    let gt_node = tape.constant(Tensor::from_f64s(r, 3, gt));
    let diff = tape.sub(color, gt_node);
    let sq = tape.square(diff);
    let s = tape.sum_all(sq);
    tape.affine(s, 1.0 / r as f64, 0.0)
}

/// Squared depth error on supervised rays (`(ray index, depth)` pairs),
/// mean over the supervised subset; zero when none carry depth.
pub fn loss_depth<F: Real>(
    tape: &mut Tape<F>,
    depth: NodeId,
    supervised: &[(usize, f64)],
) -> NodeId {
    if supervised.is_empty() {
        return tape.constant_scalar(0.0);
    }
    let idx: Arc<Vec<u32>> = Arc::new(supervised.iter().map(|(r, _)| *r as u32).collect());
    let gt: Vec<f64> = supervised.iter().map(|(_, d)| *d).collect();
    let d = tape.gather_rows(depth, idx);
    let gt_node = tape.constant(Tensor::from_f64s(gt.len(), 1, &gt));
    let diff = tape.sub(d, gt_node);
    let sq = tape.square(diff);
    let s = tape.sum_all(sq);
    tape.affine(s, 1.0 / supervised.len() as f64, 0.0)
}

/// `Σ w_i H(σ_ψ / (σ_φ + σ_ψ + 1e-10))` over bins inside box hits, mean
/// over rays. Bins outside boxes have exactly zero dynamic density and
/// contribute nothing.
pub fn loss_entropy<F: Real>(
    tape: &mut Tape<F>,
    sigma_static: NodeId,
    sigma_dynamic: NodeId,
    weights: NodeId,
    bins_in_boxes: &[bool],
    num_rays: usize,
) -> NodeId {
    let rows: Vec<u32> = bins_in_boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b)
        .map(|(i, _)| i as u32)
        .collect();
    if rows.is_empty() {
        return tape.constant_scalar(0.0);
    }
    let idx = Arc::new(rows);
    let ss = tape.gather_rows(sigma_static, idx.clone());
    let sd = tape.gather_rows(sigma_dynamic, idx.clone());
    let w = tape.gather_rows(weights, idx);
    let total = tape.add(ss, sd);
    let denom = tape.affine(total, 1.0, 1e-10);
    let p = tape.div(sd, denom);
    let h = tape.binary_entropy(p);
    let wh = tape.mul(w, h);
    let s = tape.sum_all(wh);
    tape.affine(s, 1.0 / num_rays as f64, 0.0)
}

/// Distortion loss over the final bins in normalized s-space, computed
/// with the O(N) prefix-sum form, mean over rays.
pub fn loss_distortion<F: Real>(
    tape: &mut Tape<F>,
    weights: NodeId,
    s_mid: &[f64],
    s_delta: &[f64],
    n_final: usize,
    num_rays: usize,
) -> NodeId {
    let n = tape.rows(weights);
    assert_eq!(n, s_mid.len());
    let m = tape.constant(Tensor::from_f64s(n, 1, s_mid));
    let dlt = tape.constant(Tensor::from_f64s(n, 1, s_delta));
    // pairwise term: 2 Σ_i w_i (m_i Σ_{j<i} w_j - Σ_{j<i} w_j m_j)
    let wm = tape.mul(weights, m);
    let cw = tape.seg_cumsum_excl(weights, n_final);
    let cwm = tape.seg_cumsum_excl(wm, n_final);
    let m_cw = tape.mul(m, cw);
    let inner = tape.sub(m_cw, cwm);
    let pair = tape.mul(weights, inner);
    let pair_sum = tape.sum_all(pair);
    let pair_term = tape.affine(pair_sum, 2.0, 0.0);
    // self term: (1/3) Σ w_i² δs_i
    let w2 = tape.square(weights);
    let w2d = tape.mul(w2, dlt);
    let self_sum = tape.sum_all(w2d);
    let self_term = tape.affine(self_sum, 1.0 / 3.0, 0.0);
    let total = tape.add(pair_term, self_term);
    tape.affine(total, 1.0 / num_rays as f64, 0.0)
}

/// Outer-measure resampling of final-bin masses onto proposal bins: each
/// proposal bin receives the sum of final masses whose support overlaps it.
pub fn resample_outer_mass(
    final_edges: &[f64],
    final_weights: &[f64],
    prop_edges: &[f64],
) -> Vec<f64> {
    let nf = final_weights.len();
    let np = prop_edges.len() - 1;
    let mut out = vec![0.0; np];
    for (j, o) in out.iter_mut().enumerate() {
        let (a, b) = (prop_edges[j], prop_edges[j + 1]);
        for k in 0..nf {
            let (lo, hi) = (final_edges[k], final_edges[k + 1]);
            if hi > a && lo < b {
                *o += final_weights[k];
            }
        }
    }
    out
}

/// Bound-based histogram loss for one proposal level: the target is the
/// detached static-only final mass resampled (outer measure) onto the
/// proposal bins; no gradient reaches the final fields.
pub fn loss_proposal<F: Real>(
    tape: &mut Tape<F>,
    trace: &ProposalTrace,
    final_edges_s: &[f64],
    static_only_weights: &[f64],
    n_final: usize,
    num_rays: usize,
) -> NodeId {
    let n = trace.bins;
    let mut target = Vec::with_capacity(num_rays * n);
    for r in 0..num_rays {
        let fe = &final_edges_s[r * (n_final + 1)..(r + 1) * (n_final + 1)];
        let fw = &static_only_weights[r * n_final..(r + 1) * n_final];
        let pe = &trace.edges_s[r * (n + 1)..(r + 1) * (n + 1)];
        target.extend(resample_outer_mass(fe, fw, pe));
    }
    let t_node = tape.constant(Tensor::from_f64s(num_rays * n, 1, &target));
    let deficit = tape.sub(t_node, trace.weights);
    let hinge = tape.relu(deficit);
    let sq = tape.square(hinge);
    let denom = tape.affine(trace.weights, 1.0, 1e-7);
    let q = tape.div(sq, denom);
    let s = tape.sum_all(q);
    tape.affine(s, 1.0 / num_rays as f64, 0.0)
}

/// `L_rgb + λ_dist L_dist + λ_prop L_prop + λ_dep L_dep + λ_entr L_entr`.
pub fn loss_total<F: Real>(
    tape: &mut Tape<F>,
    rgb: NodeId,
    dist: NodeId,
    prop: NodeId,
    dep: NodeId,
    entr: NodeId,
    w: &LossWeights,
) -> NodeId {
    let d = tape.affine(dist, w.dist, 0.0);
    let p = tape.affine(prop, w.prop, 0.0);
    let de = tape.affine(dep, w.dep, 0.0);
    let e = tape.affine(entr, w.entr, 0.0);
    let t1 = tape.add(rgb, d);
    let t2 = tape.add(p, de);
    let t3 = tape.add(t1, t2);
    tape.add(t3, e)
}

/// All loss terms for one rendered batch.
pub fn batch_losses<F: Real>(
    tape: &mut Tape<F>,
    batch: &BatchNodes,
    gt_color: &[f64],
    gt_depth: &[(usize, f64)],
    weights: &LossWeights,
) -> LossNodes {
    let rgb = loss_rgb(tape, batch.color, gt_color);
    let dep = loss_depth(tape, batch.depth, gt_depth);
    let entr = loss_entropy(
        tape,
        batch.sigma_static,
        batch.sigma_dynamic,
        batch.weights,
        &batch.bins_in_boxes,
        batch.num_rays,
    );
    let dist = loss_distortion(
        tape,
        batch.weights,
        &batch.s_mid,
        &batch.s_delta,
        batch.n_final,
        batch.num_rays,
    );
    let prop = if batch.proposals.is_empty() {
        tape.constant_scalar(0.0)
    } else {
        let mut acc = None;
        for trace in &batch.proposals {
            let l = loss_proposal(
                tape,
                trace,
                &batch.edges_s,
                &batch.static_only_weights,
                batch.n_final,
                batch.num_rays,
            );
            acc = Some(match acc {
                None => l,
                Some(a) => tape.add(a, l),
            });
        }
        acc.unwrap()
    };
    let total = loss_total(tape, rgb, dist, prop, dep, entr, weights);
    LossNodes {
        rgb,
        dist,
        prop,
        dep,
        entr,
        total,
    }
}
