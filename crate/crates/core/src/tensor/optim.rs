use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// First/second moment estimates for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = |s: &ParamStore| {
            s.iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        AdamState {
            m: zeros(store),
            v: zeros(store),
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One bias-corrected Adam update using the gradients held in `store`,
    /// which are cleared afterwards. Frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if self.m.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match parameter store"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for ((p, m), v) in store
            .params_mut()
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if p.trainable {
                let g = p.grad.data();
                for (((w, mi), vi), &gi) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(g)
                {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            p.grad.data_mut().fill(0.0);
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5) · base_scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub d_model: usize,
    pub warmup_steps: usize,
    pub base_scale: f64,
}

impl LrSchedule {
    pub fn new(d_model: usize, warmup_steps: usize) -> Self {
        LrSchedule {
            d_model,
            warmup_steps,
            base_scale: 1.0,
        }
    }

    /// Schedule whose peak (reached at `step == warmup_steps`) equals `peak_lr`.
    pub fn with_peak(d_model: usize, warmup_steps: usize, peak_lr: f64) -> Self {
        let mut s = Self::new(d_model, warmup_steps);
        let raw_peak = (d_model as f64).powf(-0.5) * (warmup_steps as f64).powf(-0.5);
        s.base_scale = peak_lr / raw_peak;
        s
    }

    pub fn lr_at_step(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(Error::invalid("learning-rate schedule is defined from step 1"));
        }
        let s = step as f64;
        let w = self.warmup_steps as f64;
        Ok((self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)) * self.base_scale)
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for p in store.params_mut() {
            for g in p.grad.data_mut() {
                *g *= c;
            }
        }
    }
    norm
}

/// Adam plus schedule plus optional clipping, stepped once per batch.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub adam: AdamState,
    pub schedule: LrSchedule,
    pub clip_norm: Option<f64>,
}

impl Optimizer {
    /// Applies the accumulated gradients and returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        if let Some(c) = self.clip_norm {
            clip_grad_norm(store, c);
        }
        let lr = self.schedule.lr_at_step(self.adam.step + 1)?;
        self.adam.step(store, lr)?;
        Ok(lr)
    }
}
