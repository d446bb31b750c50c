//! The operation tape: forward evaluation records nodes in topological
//! order; `backward` walks them in reverse, accumulating vector-Jacobian
//! products into node gradients and the parameter [`GradStore`].

use super::{GradStore, ParamId, ParamStore, Real, Tensor};
use crate::dual::Dual;
use crate::encoding::{corner_set, sh_basis_generic, HashGridConfig};
use crate::lie::{contract_generic, contract_jacobian};
use crate::geom::Vec3;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward root must be a scalar node")]
    NonScalarRoot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    /// Leaf whose gradient is retained for the caller (ray origins,
    /// directions, per-group transforms).
    Input,
    /// Leaf copied from a parameter tensor.
    Param(ParamId),
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRowVec(NodeId, NodeId),
    MulColVec(NodeId, NodeId),
    AffineConst(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Square(NodeId),
    NormalizeRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Arc<Vec<u32>>),
    GatherParamRows(ParamId, Arc<Vec<u32>>),
    ScatterAddRows(NodeId, Arc<Vec<u32>>),
    SegSum(NodeId, usize),
    SegCumsumExcl(NodeId, usize),
    SumAll(NodeId),
    HashGrid(NodeId, ParamId, Arc<HashGridConfig>),
    PosEnc(NodeId, usize),
    ShEnc(NodeId, usize),
    Contract(NodeId),
    /// Density-weighted color blend `(sa*ca + sb*cb)/(sa+sb)` with the
    /// `ca` fallback when both densities vanish.
    ColorBlend {
        sa: NodeId,
        ca: NodeId,
        sb: NodeId,
        cb: NodeId,
    },
    BinaryEntropy(NodeId),
}

struct Node<F> {
    rows: usize,
    cols: usize,
    vals: Vec<F>,
    op: Op,
}

/// Density floor below which blends fall back to the first color.
pub const BLEND_EPS: f64 = 1e-8;

pub struct Tape<'a, F: Real> {
    params: &'a ParamStore<F>,
    nodes: Vec<Node<F>>,
    input_grads: Vec<Option<Vec<F>>>,
}

impl<'a, F: Real> Tape<'a, F> {
    pub fn new(params: &'a ParamStore<F>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            input_grads: Vec::new(),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, vals: Vec<F>, op: Op) -> NodeId {
        debug_assert_eq!(vals.len(), rows * cols);
        debug_assert!(
            vals.iter().all(|v| v.is_finite()),
            "non-finite values out of {op:?}"
        );
        self.nodes.push(Node { rows, cols, vals, op });
        self.input_grads.push(None);
        NodeId((self.nodes.len() - 1) as u32)
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.idx()].rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id.idx()].cols
    }

    pub fn values(&self, id: NodeId) -> &[F] {
        &self.nodes[id.idx()].vals
    }

    pub fn value_scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.idx()].vals.len(), 1);
        self.nodes[id.idx()].vals[0].f64()
    }

    /// Gradient captured on an `input` leaf during the last backward pass.
    pub fn input_grad(&self, id: NodeId) -> Option<&[F]> {
        self.input_grads[id.idx()].as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn params(&self) -> &ParamStore<F> {
        self.params
    }

    // ---- leaves ----

    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t.rows, t.cols, t.data, Op::Const)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(1, 1, vec![F::of(v)], Op::Const)
    }

    pub fn input(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t.rows, t.cols, t.data, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let e = self.params.get(id);
        self.push(e.rows, e.cols, e.data.clone(), Op::Param(id))
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            &self.nodes[a.idx()].vals,
            false,
            &self.nodes[b.idx()].vals,
            false,
            F::zero(),
            &mut out,
        );
        self.push(m, n, out, Op::Matmul(a, b))
    }

    fn zip2(&mut self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F, op: Op) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(
            (r, c),
            (self.rows(b), self.cols(b)),
            "elementwise shape mismatch"
        );
        let vals = self.nodes[a.idx()]
            .vals
            .iter()
            .zip(self.nodes[b.idx()].vals.iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(r, c, vals, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_row_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        assert_eq!(self.rows(v), 1, "row vector expected");
        assert_eq!(self.cols(v), c, "row vector width mismatch");
        let mut vals = self.nodes[x.idx()].vals.clone();
        let vv = &self.nodes[v.idx()].vals;
        for row in vals.chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(vv.iter()) {
                *o = *o + *b;
            }
        }
        self.push(r, c, vals, Op::AddRowVec(x, v))
    }

    pub fn mul_col_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        assert_eq!(self.rows(v), r, "column vector length mismatch");
        assert_eq!(self.cols(v), 1, "column vector expected");
        let mut vals = self.nodes[x.idx()].vals.clone();
        let vv = &self.nodes[v.idx()].vals;
        for (i, row) in vals.chunks_exact_mut(c).enumerate() {
            for o in row.iter_mut() {
                *o = *o * vv[i];
            }
        }
        self.push(r, c, vals, Op::MulColVec(x, v))
    }

    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        let (fa, fb) = (F::of(a), F::of(b));
        let vals = self.nodes[x.idx()].vals.iter().map(|v| *v * fa + fb).collect();
        self.push(r, c, vals, Op::AffineConst(x, a))
    }

    fn map1(&mut self, x: NodeId, f: impl Fn(F) -> F, op: Op) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        let vals = self.nodes[x.idx()].vals.iter().map(|v| f(*v)).collect();
        self.push(r, c, vals, op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map1(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map1(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.map1(x, stable_softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.map1(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.map1(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.map1(x, |v| v.sin(), Op::Sin(x))
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.map1(x, |v| v.cos(), Op::Cos(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.map1(x, |v| v * v, Op::Square(x))
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        let mut vals = self.nodes[x.idx()].vals.clone();
        for row in vals.chunks_exact_mut(c) {
            let n = row.iter().map(|v| *v * *v).sum::<F>().sqrt();
            for v in row.iter_mut() {
                *v = *v / n;
            }
        }
        self.push(r, c, vals, Op::NormalizeRows(x))
    }

    pub fn concat_cols(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty());
        let r = self.rows(ids[0]);
        let total: usize = ids.iter().map(|i| {
            assert_eq!(self.rows(*i), r, "concat rows mismatch");
            self.cols(*i)
        }).sum();
        let mut vals = vec![F::zero(); r * total];
        let mut off = 0;
        for id in ids {
            let c = self.cols(*id);
            let src = &self.nodes[id.idx()].vals;
            for row in 0..r {
                vals[row * total + off..row * total + off + c]
                    .copy_from_slice(&src[row * c..(row + 1) * c]);
            }
            off += c;
        }
        self.push(r, total, vals, Op::ConcatCols(ids.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        assert!(start + len <= c, "slice out of range");
        let src = &self.nodes[x.idx()].vals;
        let mut vals = vec![F::zero(); r * len];
        for row in 0..r {
            vals[row * len..(row + 1) * len]
                .copy_from_slice(&src[row * c + start..row * c + start + len]);
        }
        self.push(r, len, vals, Op::SliceCols(x, start, len))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<u32>>) -> NodeId {
        let c = self.cols(x);
        let src = &self.nodes[x.idx()].vals;
        let mut vals = vec![F::zero(); idx.len() * c];
        for (k, i) in idx.iter().enumerate() {
            vals[k * c..(k + 1) * c]
                .copy_from_slice(&src[*i as usize * c..(*i as usize + 1) * c]);
        }
        self.push(idx.len(), c, vals, Op::GatherRows(x, idx))
    }

    pub fn gather_param_rows(&mut self, pid: ParamId, idx: Arc<Vec<u32>>) -> NodeId {
        let e = self.params.get(pid);
        let c = e.cols;
        let mut vals = vec![F::zero(); idx.len() * c];
        for (k, i) in idx.iter().enumerate() {
            vals[k * c..(k + 1) * c]
                .copy_from_slice(&e.data[*i as usize * c..(*i as usize + 1) * c]);
        }
        self.push(idx.len(), c, vals, Op::GatherParamRows(pid, idx))
    }

    /// `out[idx[k], :] += x[k, :]` into a fresh zero tensor of `out_rows`.
    pub fn scatter_add_rows(&mut self, x: NodeId, idx: Arc<Vec<u32>>, out_rows: usize) -> NodeId {
        let c = self.cols(x);
        assert_eq!(self.rows(x), idx.len());
        let src = &self.nodes[x.idx()].vals;
        let mut vals = vec![F::zero(); out_rows * c];
        for (k, i) in idx.iter().enumerate() {
            let dst = *i as usize * c;
            for j in 0..c {
                vals[dst + j] = vals[dst + j] + src[k * c + j];
            }
        }
        self.push(out_rows, c, vals, Op::ScatterAddRows(x, idx))
    }

    /// Sums fixed-length row segments: `[R*len, C] -> [R, C]`.
    pub fn seg_sum(&mut self, x: NodeId, len: usize) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        assert_eq!(r % len, 0, "segment length does not divide rows");
        let out_r = r / len;
        let src = &self.nodes[x.idx()].vals;
        let mut vals = vec![F::zero(); out_r * c];
        for seg in 0..out_r {
            for l in 0..len {
                let row = (seg * len + l) * c;
                for j in 0..c {
                    vals[seg * c + j] = vals[seg * c + j] + src[row + j];
                }
            }
        }
        self.push(out_r, c, vals, Op::SegSum(x, len))
    }

    /// Exclusive cumulative sum within fixed-length row segments.
    pub fn seg_cumsum_excl(&mut self, x: NodeId, len: usize) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        assert_eq!(r % len, 0);
        let src = &self.nodes[x.idx()].vals;
        let mut vals = vec![F::zero(); r * c];
        for seg in 0..r / len {
            for j in 0..c {
                let mut acc = F::zero();
                for l in 0..len {
                    let i = (seg * len + l) * c + j;
                    vals[i] = acc;
                    acc = acc + src[i];
                }
            }
        }
        self.push(r, c, vals, Op::SegCumsumExcl(x, len))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: F = self.nodes[x.idx()].vals.iter().copied().sum();
        self.push(1, 1, vec![s], Op::SumAll(x))
    }

    /// Multi-resolution hash grid encode of `[N, 3]` positions in the
    /// contracted `[-2, 2]³` domain; differentiable in the table and `x`.
    pub fn hash_grid(&mut self, x: NodeId, pid: ParamId, cfg: Arc<HashGridConfig>) -> NodeId {
        assert_eq!(self.cols(x), 3);
        let n = self.rows(x);
        let f = cfg.features_per_entry;
        let table = &self.params.get(pid).data;
        let src = &self.nodes[x.idx()].vals;
        let out_c = cfg.output_dim();
        let mut vals = vec![F::zero(); n * out_c];
        for i in 0..n {
            let p = [
                src[i * 3].f64(),
                src[i * 3 + 1].f64(),
                src[i * 3 + 2].f64(),
            ];
            for level in 0..cfg.num_levels {
                let cs = corner_set(&cfg, level, p);
                for c in 0..8 {
                    let w = F::of(cs.weights[c]);
                    let base = cs.rows[c] * f;
                    for k in 0..f {
                        let o = i * out_c + level * f + k;
                        vals[o] = vals[o] + w * table[base + k];
                    }
                }
            }
        }
        self.push(n, out_c, vals, Op::HashGrid(x, pid, cfg))
    }

    /// Sin/cos positional encoding with `levels` octaves per component.
    pub fn pos_enc(&mut self, x: NodeId, levels: usize) -> NodeId {
        let (n, d) = (self.rows(x), self.cols(x));
        let out_c = 2 * levels * d;
        let src = &self.nodes[x.idx()].vals;
        let mut vals = vec![F::zero(); n * out_c];
        for i in 0..n {
            for j in 0..d {
                let v = src[i * d + j].f64();
                for l in 0..levels {
                    let arg = (1u64 << l) as f64 * std::f64::consts::PI * v;
                    let o = i * out_c + j * 2 * levels + 2 * l;
                    vals[o] = F::of(arg.sin());
                    vals[o + 1] = F::of(arg.cos());
                }
            }
        }
        self.push(n, out_c, vals, Op::PosEnc(x, levels))
    }

    /// Spherical harmonics encode of `[N, 3]` unit directions.
    pub fn sh_enc(&mut self, x: NodeId, degree: usize) -> NodeId {
        assert_eq!(self.cols(x), 3);
        let n = self.rows(x);
        let out_c = degree * degree;
        let src = &self.nodes[x.idx()].vals;
        let mut vals = vec![F::zero(); n * out_c];
        let mut buf = vec![0.0f64; out_c];
        for i in 0..n {
            sh_basis_generic(
                src[i * 3].f64(),
                src[i * 3 + 1].f64(),
                src[i * 3 + 2].f64(),
                degree,
                &mut buf,
            );
            for (j, v) in buf.iter().enumerate() {
                vals[i * out_c + j] = F::of(*v);
            }
        }
        self.push(n, out_c, vals, Op::ShEnc(x, degree))
    }

    /// ∞-norm space contraction of `[N, 3]` positions.
    pub fn contract(&mut self, x: NodeId) -> NodeId {
        assert_eq!(self.cols(x), 3);
        let n = self.rows(x);
        let src = &self.nodes[x.idx()].vals;
        let mut vals = vec![F::zero(); n * 3];
        for i in 0..n {
            let y = contract_generic(Vec3::new(
                src[i * 3].f64(),
                src[i * 3 + 1].f64(),
                src[i * 3 + 2].f64(),
            ));
            for j in 0..3 {
                vals[i * 3 + j] = F::of(y.0[j]);
            }
        }
        self.push(n, 3, vals, Op::Contract(x))
    }

    /// Density-weighted color blend; see [`Op::ColorBlend`].
    pub fn color_blend(&mut self, sa: NodeId, ca: NodeId, sb: NodeId, cb: NodeId) -> NodeId {
        let n = self.rows(sa);
        assert_eq!(self.cols(sa), 1);
        assert_eq!(self.cols(sb), 1);
        assert_eq!((self.rows(ca), self.cols(ca)), (n, 3));
        assert_eq!((self.rows(cb), self.cols(cb)), (n, 3));
        let eps = F::of(BLEND_EPS);
        let mut vals = vec![F::zero(); n * 3];
        {
            let sa_v = &self.nodes[sa.idx()].vals;
            let sb_v = &self.nodes[sb.idx()].vals;
            let ca_v = &self.nodes[ca.idx()].vals;
            let cb_v = &self.nodes[cb.idx()].vals;
            for i in 0..n {
                let s = sa_v[i] + sb_v[i];
                if s < eps {
                    vals[i * 3..(i + 1) * 3].copy_from_slice(&ca_v[i * 3..(i + 1) * 3]);
                } else {
                    for j in 0..3 {
                        vals[i * 3 + j] =
                            (sa_v[i] * ca_v[i * 3 + j] + sb_v[i] * cb_v[i * 3 + j]) / s;
                    }
                }
            }
        }
        self.push(n, 3, vals, Op::ColorBlend { sa, ca, sb, cb })
    }

    /// Shannon entropy of a Bernoulli probability, elementwise, in nats;
    /// zero (with zero gradient) at the endpoints.
    pub fn binary_entropy(&mut self, p: NodeId) -> NodeId {
        self.map1(
            p,
            |v| {
                let p = v.f64();
                if p <= 0.0 || p >= 1.0 {
                    F::zero()
                } else {
                    F::of(-p * p.ln() - (1.0 - p) * (1.0 - p).ln())
                }
            },
            Op::BinaryEntropy(p),
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar `root`. Parameter gradients accumulate
    /// into `grads`; `Input` leaf gradients are retained on the tape.
    pub fn backward(&mut self, root: NodeId, grads: &mut GradStore<F>) -> Result<(), TapeError> {
        if self.nodes[root.idx()].vals.len() != 1 {
            return Err(TapeError::NonScalarRoot);
        }
        let n = self.nodes.len();
        let mut g: Vec<Option<Vec<F>>> = vec![None; n];
        g[root.idx()] = Some(vec![F::one()]);

        for i in (0..n).rev() {
            let Some(gy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            let (rows, cols) = (node.rows, node.cols);
            macro_rules! acc {
                ($id:expr, $f:expr) => {{
                    let id: NodeId = $id;
                    let tgt = &mut g[id.idx()];
                    if tgt.is_none() {
                        *tgt = Some(vec![F::zero(); self.nodes[id.idx()].vals.len()]);
                    }
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(tgt.as_mut().unwrap());
                }};
            }
            match &node.op {
                Op::Const => {}
                Op::Input => {
                    self.input_grads[i] = Some(gy);
                }
                Op::Param(pid) => {
                    let buf = grads.buffer_mut(*pid, gy.len());
                    for (d, s) in buf.iter_mut().zip(gy.iter()) {
                        *d = *d + *s;
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.idx()].rows, self.nodes[a.idx()].cols);
                    let nn = self.nodes[b.idx()].cols;
                    let av = &self.nodes[a.idx()].vals;
                    let bv = &self.nodes[b.idx()].vals;
                    acc!(*a, |ga: &mut Vec<F>| {
                        // ga += gy @ b^T : [m,n]x[n,k]
                        F::gemm(m, nn, k, F::one(), &gy, false, bv, true, F::one(), ga);
                    });
                    acc!(*b, |gb: &mut Vec<F>| {
                        // gb += a^T @ gy : [k,m]x[m,n]
                        F::gemm(k, m, nn, F::one(), av, true, &gy, false, F::one(), gb);
                    });
                }
                Op::Add(a, b) => {
                    acc!(*a, |ga: &mut Vec<F>| add_into(ga, &gy));
                    acc!(*b, |gb: &mut Vec<F>| add_into(gb, &gy));
                }
                Op::Sub(a, b) => {
                    acc!(*a, |ga: &mut Vec<F>| add_into(ga, &gy));
                    acc!(*b, |gb: &mut Vec<F>| sub_into(gb, &gy));
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.idx()].vals;
                    let bv = &self.nodes[b.idx()].vals;
                    acc!(*a, |ga: &mut Vec<F>| {
                        for ((d, s), w) in ga.iter_mut().zip(gy.iter()).zip(bv.iter()) {
                            *d = *d + *s * *w;
                        }
                    });
                    acc!(*b, |gb: &mut Vec<F>| {
                        for ((d, s), w) in gb.iter_mut().zip(gy.iter()).zip(av.iter()) {
                            *d = *d + *s * *w;
                        }
                    });
                }
                Op::Div(a, b) => {
                    let yv = &node.vals;
                    let bv = &self.nodes[b.idx()].vals;
                    acc!(*a, |ga: &mut Vec<F>| {
                        for ((d, s), den) in ga.iter_mut().zip(gy.iter()).zip(bv.iter()) {
                            *d = *d + *s / *den;
                        }
                    });
                    acc!(*b, |gb: &mut Vec<F>| {
                        for (((d, s), y), den) in
                            gb.iter_mut().zip(gy.iter()).zip(yv.iter()).zip(bv.iter())
                        {
                            *d = *d - *s * *y / *den;
                        }
                    });
                }
                Op::AddRowVec(x, v) => {
                    acc!(*x, |gx: &mut Vec<F>| add_into(gx, &gy));
                    acc!(*v, |gv: &mut Vec<F>| {
                        for row in gy.chunks_exact(cols) {
                            for (d, s) in gv.iter_mut().zip(row.iter()) {
                                *d = *d + *s;
                            }
                        }
                    });
                }
                Op::MulColVec(x, v) => {
                    let xv = &self.nodes[x.idx()].vals;
                    let vv = &self.nodes[v.idx()].vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for (r, row) in gy.chunks_exact(cols).enumerate() {
                            let w = vv[r];
                            for (j, s) in row.iter().enumerate() {
                                gx[r * cols + j] = gx[r * cols + j] + *s * w;
                            }
                        }
                    });
                    acc!(*v, |gv: &mut Vec<F>| {
                        for (r, row) in gy.chunks_exact(cols).enumerate() {
                            let mut acc = F::zero();
                            for (j, s) in row.iter().enumerate() {
                                acc = acc + *s * xv[r * cols + j];
                            }
                            gv[r] = gv[r] + acc;
                        }
                    });
                }
                Op::AffineConst(x, a) => {
                    let fa = F::of(*a);
                    acc!(*x, |gx: &mut Vec<F>| {
                        for (d, s) in gx.iter_mut().zip(gy.iter()) {
                            *d = *d + *s * fa;
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.idx()].vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for ((d, s), v) in gx.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                            if *v > F::zero() {
                                *d = *d + *s;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let yv = &node.vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for ((d, s), y) in gx.iter_mut().zip(gy.iter()).zip(yv.iter()) {
                            *d = *d + *s * *y * (F::one() - *y);
                        }
                    });
                }
                Op::Softplus(x) => {
                    let xv = &self.nodes[x.idx()].vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for ((d, s), v) in gx.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                            *d = *d + *s * stable_sigmoid(*v);
                        }
                    });
                }
                Op::Exp(x) => {
                    let yv = &node.vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for ((d, s), y) in gx.iter_mut().zip(gy.iter()).zip(yv.iter()) {
                            *d = *d + *s * *y;
                        }
                    });
                }
                Op::Ln(x) => {
                    let xv = &self.nodes[x.idx()].vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for ((d, s), v) in gx.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                            *d = *d + *s / *v;
                        }
                    });
                }
                Op::Sin(x) => {
                    let xv = &self.nodes[x.idx()].vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for ((d, s), v) in gx.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                            *d = *d + *s * v.cos();
                        }
                    });
                }
                Op::Cos(x) => {
                    let xv = &self.nodes[x.idx()].vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for ((d, s), v) in gx.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                            *d = *d - *s * v.sin();
                        }
                    });
                }
                Op::Square(x) => {
                    let xv = &self.nodes[x.idx()].vals;
                    let two = F::of(2.0);
                    acc!(*x, |gx: &mut Vec<F>| {
                        for ((d, s), v) in gx.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                            *d = *d + *s * two * *v;
                        }
                    });
                }
                Op::NormalizeRows(x) => {
                    let xv = &self.nodes[x.idx()].vals;
                    let yv = &node.vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for r in 0..rows {
                            let xr = &xv[r * cols..(r + 1) * cols];
                            let yr = &yv[r * cols..(r + 1) * cols];
                            let gr = &gy[r * cols..(r + 1) * cols];
                            let n = xr.iter().map(|v| *v * *v).sum::<F>().sqrt();
                            let dot = yr.iter().zip(gr.iter()).map(|(a, b)| *a * *b).sum::<F>();
                            for j in 0..cols {
                                gx[r * cols + j] =
                                    gx[r * cols + j] + (gr[j] - yr[j] * dot) / n;
                            }
                        }
                    });
                }
                Op::ConcatCols(ids) => {
                    let ids = ids.clone();
                    let mut off = 0;
                    for id in ids {
                        let c = self.nodes[id.idx()].cols;
                        acc!(id, |gx: &mut Vec<F>| {
                            for r in 0..rows {
                                for j in 0..c {
                                    gx[r * c + j] = gx[r * c + j] + gy[r * cols + off + j];
                                }
                            }
                        });
                        off += c;
                    }
                }
                Op::SliceCols(x, start, len) => {
                    let (start, len) = (*start, *len);
                    let xc = self.nodes[x.idx()].cols;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for r in 0..rows {
                            for j in 0..len {
                                gx[r * xc + start + j] =
                                    gx[r * xc + start + j] + gy[r * len + j];
                            }
                        }
                    });
                }
                Op::GatherRows(x, idx) => {
                    let idx = idx.clone();
                    acc!(*x, |gx: &mut Vec<F>| {
                        for (k, i) in idx.iter().enumerate() {
                            let dst = *i as usize * cols;
                            for j in 0..cols {
                                gx[dst + j] = gx[dst + j] + gy[k * cols + j];
                            }
                        }
                    });
                }
                Op::GatherParamRows(pid, idx) => {
                    let e = self.params.get(*pid);
                    let buf = grads.buffer_mut(*pid, e.rows * e.cols);
                    for (k, i) in idx.iter().enumerate() {
                        let dst = *i as usize * cols;
                        for j in 0..cols {
                            buf[dst + j] = buf[dst + j] + gy[k * cols + j];
                        }
                    }
                }
                Op::ScatterAddRows(x, idx) => {
                    let idx = idx.clone();
                    acc!(*x, |gx: &mut Vec<F>| {
                        for (k, i) in idx.iter().enumerate() {
                            let src = *i as usize * cols;
                            for j in 0..cols {
                                gx[k * cols + j] = gx[k * cols + j] + gy[src + j];
                            }
                        }
                    });
                }
                Op::SegSum(x, len) => {
                    let len = *len;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for seg in 0..rows {
                            for l in 0..len {
                                for j in 0..cols {
                                    let i = (seg * len + l) * cols + j;
                                    gx[i] = gx[i] + gy[seg * cols + j];
                                }
                            }
                        }
                    });
                }
                Op::SegCumsumExcl(x, len) => {
                    let len = *len;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for seg in 0..rows / len {
                            for j in 0..cols {
                                // gx_l = sum_{i > l} gy_i  (exclusive suffix sum)
                                let mut acc = F::zero();
                                for l in (0..len).rev() {
                                    let i = (seg * len + l) * cols + j;
                                    gx[i] = gx[i] + acc;
                                    acc = acc + gy[i];
                                }
                            }
                        }
                    });
                }
                Op::SumAll(x) => {
                    let s = gy[0];
                    acc!(*x, |gx: &mut Vec<F>| {
                        for d in gx.iter_mut() {
                            *d = *d + s;
                        }
                    });
                }
                Op::HashGrid(x, pid, cfg) => {
                    let cfg = cfg.clone();
                    let f = cfg.features_per_entry;
                    let xv = &self.nodes[x.idx()].vals;
                    let table = &self.params.get(*pid).data;
                    let nrows = rows;
                    {
                        let e = self.params.get(*pid);
                        let buf = grads.buffer_mut(*pid, e.rows * e.cols);
                        for i in 0..nrows {
                            let p = [
                                xv[i * 3].f64(),
                                xv[i * 3 + 1].f64(),
                                xv[i * 3 + 2].f64(),
                            ];
                            for level in 0..cfg.num_levels {
                                let cs = corner_set(&cfg, level, p);
                                for c in 0..8 {
                                    let w = F::of(cs.weights[c]);
                                    let base = cs.rows[c] * f;
                                    for k in 0..f {
                                        buf[base + k] =
                                            buf[base + k] + w * gy[i * cols + level * f + k];
                                    }
                                }
                            }
                        }
                    }
                    acc!(*x, |gx: &mut Vec<F>| {
                        for i in 0..nrows {
                            let p = [
                                xv[i * 3].f64(),
                                xv[i * 3 + 1].f64(),
                                xv[i * 3 + 2].f64(),
                            ];
                            let mut acc3 = [0.0f64; 3];
                            for level in 0..cfg.num_levels {
                                let cs = corner_set(&cfg, level, p);
                                for c in 0..8 {
                                    let base = cs.rows[c] * f;
                                    for k in 0..f {
                                        let gyv = gy[i * cols + level * f + k].f64()
                                            * table[base + k].f64();
                                        for a in 0..3 {
                                            acc3[a] += gyv * cs.weight_grads[c][a];
                                        }
                                    }
                                }
                            }
                            for a in 0..3 {
                                gx[i * 3 + a] = gx[i * 3 + a] + F::of(acc3[a]);
                            }
                        }
                    });
                }
                Op::PosEnc(x, levels) => {
                    let levels = *levels;
                    let xc = self.nodes[x.idx()].cols;
                    let xv = &self.nodes[x.idx()].vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for i in 0..rows {
                            for j in 0..xc {
                                let v = xv[i * xc + j].f64();
                                let mut acc = 0.0f64;
                                for l in 0..levels {
                                    let freq = (1u64 << l) as f64 * std::f64::consts::PI;
                                    let arg = freq * v;
                                    let o = i * cols + j * 2 * levels + 2 * l;
                                    acc += gy[o].f64() * freq * arg.cos();
                                    acc -= gy[o + 1].f64() * freq * arg.sin();
                                }
                                gx[i * xc + j] = gx[i * xc + j] + F::of(acc);
                            }
                        }
                    });
                }
                Op::ShEnc(x, degree) => {
                    let degree = *degree;
                    let xv = &self.nodes[x.idx()].vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        let mut duals = vec![Dual::<3>::constant(0.0); degree * degree];
                        for i in 0..rows {
                            sh_basis_generic(
                                Dual::var(xv[i * 3].f64(), 0),
                                Dual::var(xv[i * 3 + 1].f64(), 1),
                                Dual::var(xv[i * 3 + 2].f64(), 2),
                                degree,
                                &mut duals,
                            );
                            let mut acc3 = [0.0f64; 3];
                            for (j, d) in duals.iter().enumerate() {
                                let gyv = gy[i * cols + j].f64();
                                for a in 0..3 {
                                    acc3[a] += gyv * d.dx[a];
                                }
                            }
                            for a in 0..3 {
                                gx[i * 3 + a] = gx[i * 3 + a] + F::of(acc3[a]);
                            }
                        }
                    });
                }
                Op::Contract(x) => {
                    let xv = &self.nodes[x.idx()].vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for i in 0..rows {
                            let p = Vec3::new(
                                xv[i * 3].f64(),
                                xv[i * 3 + 1].f64(),
                                xv[i * 3 + 2].f64(),
                            );
                            if p.norm_inf_value() <= 1.0 {
                                for a in 0..3 {
                                    gx[i * 3 + a] = gx[i * 3 + a] + gy[i * 3 + a];
                                }
                            } else {
                                let j = contract_jacobian(p);
                                for a in 0..3 {
                                    let mut acc = 0.0f64;
                                    for r in 0..3 {
                                        acc += gy[i * 3 + r].f64() * j[r][a];
                                    }
                                    gx[i * 3 + a] = gx[i * 3 + a] + F::of(acc);
                                }
                            }
                        }
                    });
                }
                Op::ColorBlend { sa, ca, sb, cb } => {
                    let (sa, ca, sb, cb) = (*sa, *ca, *sb, *cb);
                    let sav = &self.nodes[sa.idx()].vals;
                    let sbv = &self.nodes[sb.idx()].vals;
                    let cav = &self.nodes[ca.idx()].vals;
                    let cbv = &self.nodes[cb.idx()].vals;
                    let yv = &node.vals;
                    let eps = F::of(BLEND_EPS);
                    acc!(ca, |gca: &mut Vec<F>| {
                        for i in 0..rows {
                            let s = sav[i] + sbv[i];
                            let w = if s < eps { F::one() } else { sav[i] / s };
                            for j in 0..3 {
                                gca[i * 3 + j] = gca[i * 3 + j] + gy[i * 3 + j] * w;
                            }
                        }
                    });
                    acc!(cb, |gcb: &mut Vec<F>| {
                        for i in 0..rows {
                            let s = sav[i] + sbv[i];
                            if s >= eps {
                                let w = sbv[i] / s;
                                for j in 0..3 {
                                    gcb[i * 3 + j] = gcb[i * 3 + j] + gy[i * 3 + j] * w;
                                }
                            }
                        }
                    });
                    acc!(sa, |gsa: &mut Vec<F>| {
                        for i in 0..rows {
                            let s = sav[i] + sbv[i];
                            if s >= eps {
                                let mut acc = F::zero();
                                for j in 0..3 {
                                    acc = acc
                                        + gy[i * 3 + j] * (cav[i * 3 + j] - yv[i * 3 + j]) / s;
                                }
                                gsa[i] = gsa[i] + acc;
                            }
                        }
                    });
                    acc!(sb, |gsb: &mut Vec<F>| {
                        for i in 0..rows {
                            let s = sav[i] + sbv[i];
                            if s >= eps {
                                let mut acc = F::zero();
                                for j in 0..3 {
                                    acc = acc
                                        + gy[i * 3 + j] * (cbv[i * 3 + j] - yv[i * 3 + j]) / s;
                                }
                                gsb[i] = gsb[i] + acc;
                            }
                        }
                    });
                }
                Op::BinaryEntropy(x) => {
                    let xv = &self.nodes[x.idx()].vals;
                    acc!(*x, |gx: &mut Vec<F>| {
                        for ((d, s), v) in gx.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                            let p = v.f64().clamp(1e-12, 1.0 - 1e-12);
                            if v.f64() > 0.0 && v.f64() < 1.0 {
                                *d = *d + *s * F::of(((1.0 - p) / p).ln());
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *d + *s;
    }
}

#[inline]
fn sub_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *d - *s;
    }
}

#[inline]
fn stable_sigmoid<F: Real>(x: F) -> F {
    let v = x.f64();
    F::of(if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    })
}

#[inline]
fn stable_softplus<F: Real>(x: F) -> F {
    let v = x.f64();
    F::of(if v > 20.0 { v } else { v.exp().ln_1p() })
}
