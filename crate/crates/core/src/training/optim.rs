use serde::{Deserialize, Serialize};

use crate::encoder::is_norm_param;
use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "optim.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("optim.{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("optim.eps must be positive, got {}", self.eps)));
        }
        if self.warmup_steps != 0 {
            return Err(Error::Config("optim.warmup_steps: warmup is not supported, use 0".into()));
        }
        Ok(())
    }
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`; constant when
/// `total_steps` is 0.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f32) -> f32 {
    if total_steps == 0 {
        return base_lr;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    (base_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())) as f32
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn matches(&self, params: &ParamSet) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .tensors()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.numel() && v.len() == p.numel())
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
///
/// `grads[i] == None` stands for an all-zero gradient. Nothing is modified
/// if any gradient is non-finite.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Option<&[f32]>],
    state: &mut AdamState,
    cfg: &OptimConfig,
    lr: f32,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::shape(
            "adamw_step",
            format!("{} grads / state for {} parameters", grads.len(), params.len()),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != params.tensors()[i].numel() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("gradient for {} has {} entries", params.names()[i], g.len()),
                ));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at index {j} is {}",
                    params.names()[i],
                    g[j]
                )));
            }
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = lr as f64;
    let eps = cfg.eps as f64;
    let names = params.names().to_vec();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let wd = if is_norm_param(&names[i]) {
            0.0
        } else {
            cfg.weight_decay as f64
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i];
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]) as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = (mj / c1) / ((vj / c2).sqrt() + eps) + wd * *w as f64;
            *w = (*w as f64 - lr * update) as f32;
        }
    }
    Ok(())
}
