//! AdamW with decoupled weight decay, a separate learning rate for the
//! vision-encoder parameter group, and a step-decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Optimizer hyperparameters. Parameters whose path starts with `msve.`
/// form the vision group and use `msve_lr`; everything else uses `lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub msve_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            msve_lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

/// AdamW state: first/second moments per parameter path plus the step count
/// that drives bias correction. Weight decay is decoupled — it never enters
/// the moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Completed update steps (bias correction uses `step + 1` during a step).
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> AdamW {
        AdamW { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Apply one update from the gradients accumulated in `params`.
    /// `lr_scale` multiplies both group rates (the schedule's knob).
    ///
    /// Fails without touching anything if any gradient is non-finite, naming
    /// the first offending parameter in path order.
    pub fn apply(&mut self, params: &mut ParamStore, lr_scale: f64) -> Result<()> {
        for (name, t) in params.iter() {
            if let Some(g) = &t.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { what: "gradient", param: name.clone() });
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for (name, tensor) in params.iter_mut() {
            let n = tensor.data.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let base = if name.starts_with("msve.") { c.msve_lr } else { c.lr };
            let lr = base * lr_scale;

            let zero = vec![0.0; n];
            let g = tensor.grad.as_deref().unwrap_or(&zero);
            for i in 0..n {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * tensor.data[i]);
            }
        }
        Ok(())
    }
}

/// Step decay: the learning-rate scale is `gamma^(epoch / step_epochs)`,
/// i.e. the rate drops by `gamma` after every `step_epochs` completed epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub gamma: f64,
    pub step_epochs: usize,
}

impl StepLr {
    /// Decay every third of the planned run.
    pub fn thirds(gamma: f64, total_epochs: usize) -> StepLr {
        StepLr { gamma, step_epochs: (total_epochs / 3).max(1) }
    }

    pub fn scale(&self, epoch: usize) -> f64 {
        if self.step_epochs == 0 {
            1.0
        } else {
            self.gamma.powi((epoch / self.step_epochs) as i32)
        }
    }
}
