use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

impl AdamW {
    /// One update: `p <- p * (1 - lr * wd)`, then the bias-corrected Adam
    /// step.
    pub fn step(&self, params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::shape("adamw_step", "parameter, gradient and state counts differ"));
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
        state.t += 1;
        let t = state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, (x, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gr;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gr * gr;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x = *x * decay - lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up to `lr_max` over `warmup` steps, then cosine decay to 0
/// at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, lr_max: f64) -> f64 {
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr_max;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr_max * 0.5 * (1.0 + (PI * progress).cos())
}
