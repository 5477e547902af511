//! AdamW with decoupled weight decay, schedules and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::nn::{Param, Scalar};
use crate::{Error, Result};

/// Cosine interpolation from `start` (at step 0) to `end` (at `total`).
/// Steps outside `[0, total]` are clamped.
pub fn cosine_schedule(start: f64, end: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return start;
    }
    let t = step.min(total) as f64 / total as f64;
    end + (start - end) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one buffer per parameter in traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub steps: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            steps: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One update. Parameters flagged `decay` shrink by `lr · wd` first.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64, wd: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        let shrink = T::lit(1.0 - lr * wd);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.len() != m.len() {
                return Err(Error::shape("optimizer moment size differs from parameter"));
            }
            let decay = p.decay && wd != 0.0;
            let Param { value, grad, .. } = &mut **p;
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + ob1 * g;
                v[i] = b2 * v[i] + ob2 * g * g;
                if decay {
                    value[i] *= shrink;
                }
                value[i] -= step_size * m[i] / (v[i].sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [&mut Param<T>], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / (norm + 1e-6));
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
