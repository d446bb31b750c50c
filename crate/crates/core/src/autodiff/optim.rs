//! Adam with decoupled weight decay and exponential learning-rate decay.

use super::{GradStore, ParamGroup, ParamStore, Real};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Exponential decay from `lr_start` at step 0 to `lr_end` at `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct LRSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
}

impl LRSchedule {
    pub fn new(lr_start: f64, lr_end: f64, total_steps: u64) -> Self {
        assert!(lr_start > 0.0 && lr_end > 0.0 && total_steps > 0);
        LRSchedule {
            lr_start,
            lr_end,
            total_steps,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        let k = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(k)
    }
}

/// Per-group hyperparameters for one optimizer step. A `None` group is
/// frozen: neither parameters nor moments are touched.
#[derive(Clone, Copy, Debug)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// First/second moment buffers per parameter plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|(_, e)| vec![F::zero(); e.data.len()]).collect();
        let v = store.iter().map(|(_, e)| vec![F::zero(); e.data.len()]).collect();
        AdamState { m, v, step: 0, cfg }
    }

    /// Extends the moment buffers when parameters were added after
    /// construction (evaluation-time pose residuals).
    pub fn resize_for(&mut self, store: &ParamStore<F>) {
        for (_, e) in store.iter().skip(self.m.len()) {
            self.m.push(vec![F::zero(); e.data.len()]);
            self.v.push(vec![F::zero(); e.data.len()]);
        }
    }

    /// One bias-corrected Adam update. Decoupled weight decay scales the
    /// parameters before the Adam delta. `grad_scale` folds in batch
    /// normalization and global-norm clipping.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &GradStore<F>,
        hyper: impl Fn(ParamGroup) -> Option<GroupHyper>,
        grad_scale: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (fb1, fb2) = (F::of(b1), F::of(b2));
        let (fnb1, fnb2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let fscale = F::of(grad_scale);
        for idx in 0..store.len() {
            let pid = super::ParamId(idx as u32);
            let group = store.get(pid).group;
            let Some(h) = hyper(group) else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let entry = store.get_mut(pid);
            if h.weight_decay > 0.0 {
                let f = F::of(1.0 - h.lr * h.weight_decay);
                for p in entry.data.iter_mut() {
                    *p = *p * f;
                }
            }
            let g = grads.get(pid);
            let lr_hat = F::of(h.lr / bc1);
            let inv_bc2 = F::of(1.0 / bc2);
            let eps = F::of(self.cfg.eps);
            for i in 0..entry.data.len() {
                let gi = match g {
                    Some(gs) => gs[i] * fscale,
                    None => F::zero(),
                };
                m[i] = fb1 * m[i] + fnb1 * gi;
                v[i] = fb2 * v[i] + fnb2 * gi * gi;
                let vhat = (v[i] * inv_bc2).sqrt() + eps;
                entry.data[i] = entry.data[i] - lr_hat * m[i] / vhat;
            }
        }
    }
}
