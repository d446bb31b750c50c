//! Reverse-mode automatic differentiation over dense 2D tensors, plus the
//! Adam optimizer, learning-rate schedules, and the checkpoint blob.
//!
//! Training runs in `f32`; gradient verification instantiates the same code
//! in `f64`.

mod checkpoint;
mod optim;
mod tape;

#[cfg(test)]
mod tests;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use optim::{AdamConfig, AdamState, GroupHyper, LRSchedule};
pub use tape::{NodeId, Tape, TapeError, BLEND_EPS};

use std::collections::HashMap;

/// Scalar the tensor engine runs on. The GEMM hook dispatches to the
/// cache-blocked kernels of `matrixmultiply`.
pub trait Real:
    num_traits::Float
    + Send
    + Sync
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = alpha * a@b + beta * c` for row-major buffers; `ta`/`tb`
    /// interpret `a`/`b` as transposed views without copying.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline(always)]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k);
                assert_eq!(b.len(), k * n);
                assert_eq!(c.len(), m * n);
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major 2D tensor.
#[derive(Clone, Debug)]
pub struct Tensor<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn from_f64s(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols);
        Tensor {
            rows,
            cols,
            data: data.iter().map(|v| F::of(*v)).collect(),
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Fields, encodings, latent tables, object codes.
    Main,
    /// Ego and object pose residuals.
    Pose,
    /// Per-frame evaluation-time pose residuals.
    EvalPose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub u32);

#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
    pub group: ParamGroup,
}

impl<F> ParamEntry<F> {
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Owns every trainable tensor; the single source the tape reads from and
/// the optimizer writes to.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<F>,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), rows * cols, "param {name}: data length mismatch");
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len() as u32);
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            rows,
            cols,
            data,
            group,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<F> {
        &mut self.entries[id.0 as usize]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), e))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn any_non_finite(&self) -> Option<&str> {
        for e in &self.entries {
            if e.data.iter().any(|v| !v.is_finite()) {
                return Some(&e.name);
            }
        }
        None
    }
}

/// Per-parameter gradient accumulator. Buffers are lazily allocated and
/// merged in a fixed order across workers.
#[derive(Clone, Debug)]
pub struct GradStore<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> GradStore<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        GradStore {
            grads: vec![None; store.len()],
        }
    }

    pub fn buffer_mut(&mut self, id: ParamId, numel: usize) -> &mut [F] {
        let slot = &mut self.grads[id.0 as usize];
        if slot.is_none() {
            *slot = Some(vec![F::zero(); numel]);
        }
        slot.as_mut().unwrap()
    }

    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.grads[id.0 as usize].as_deref()
    }

    /// Adds `other` into `self`; called in worker order for determinism.
    pub fn merge(&mut self, other: &GradStore<F>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(src) = g {
                let slot = &mut self.grads[i];
                match slot {
                    Some(dst) => {
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d = *d + *s;
                        }
                    }
                    None => *slot = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for g in self.grads.iter().flatten() {
            for v in g {
                let x = v.f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }
}
