use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MambaParams;

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-3,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Parameter(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates, flattened in
/// [`MambaParams::named`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &MambaParams) -> Self {
        let n = params.num_values();
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// `lr_min + (lr_max - lr_min)(1 + cos(π iter / total)) / 2`
pub fn cosine_lr(iter: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let frac = if total == 0 { 1.0 } else { iter.min(total) as f64 / total as f64 };
    lr_min + (lr_max - lr_min) * (1.0 + (PI * frac).cos()) / 2.0
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut MambaParams, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
    }
    norm
}

/// One AdamW update: `w ← w (1 - lr λ)`, then the bias-corrected Adam step.
/// Gradients are checked for finiteness before anything is modified.
pub fn adamw_step(params: &mut MambaParams, grads: &MambaParams, state: &mut OptimizerState, lr: f64, cfg: &OptimizerConfig) -> Result<()> {
    if let Some((name, _)) = grads.named().into_iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFiniteGradient { name: name.to_string() });
    }
    if state.m.len() != params.num_values() || state.v.len() != state.m.len() {
        return Err(Error::Shape("optimizer moments do not match the parameters".into()));
    }
    let g = grads.flatten();
    if g.len() != state.m.len() {
        return Err(Error::Shape("gradient does not match the parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    let mut off = 0;
    params.for_each_mut(|_, w| {
        for (k, wk) in w.data_mut().iter_mut().enumerate() {
            let i = off + k;
            state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
            state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = state.m[i] / bc1;
            let vhat = state.v[i] / bc2;
            *wk = *wk * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        off += w.len();
    });
    Ok(())
}
