use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self { step: 0, m: Vec::new(), v: Vec::new() }
    }
}

/// One AdamW update. Weight decay is decoupled: each parameter is first
/// shrunk by `lr * weight_decay`, then moved by the bias-corrected Adam step.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("adam_step: {} params but {} grads", params.len(), grads.len())));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        state.v = state.m.clone();
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("adam_step: param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let step_size = T::lit(lr / bc1);
    let bc2_sqrt = T::lit(bc2.sqrt());
    let eps = T::lit(cfg.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            *w = *w * decay;
            *w = *w - step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

/// Linear warmup to `peak`, then cosine decay to zero at `total` steps.
pub fn warmup_cosine(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup.min(step)) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}
