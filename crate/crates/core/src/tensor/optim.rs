use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// Learning rate 3e-5 and epsilon 1e-6, the values used for fine-tuning
    /// the full-size model.
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }
}

/// Learning-rate multiplier as a function of the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear ramp from 0 over `warmup` steps, then constant.
    WarmupConstant { warmup: u64 },
    /// Linear ramp over `warmup` steps, then linear decay to 0 at `total`.
    WarmupLinear { warmup: u64, total: u64 },
}

impl LrSchedule {
    /// Multiplier for the update numbered `step` (1-based).
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupConstant { warmup } => {
                if warmup == 0 || step >= warmup {
                    1.0
                } else {
                    step as f64 / warmup as f64
                }
            }
            LrSchedule::WarmupLinear { warmup, total } => {
                if warmup > 0 && step < warmup {
                    step as f64 / warmup as f64
                } else if step >= total {
                    0.0
                } else {
                    (total - step) as f64 / (total - warmup).max(1) as f64
                }
            }
        }
    }
}

/// First/second moment buffers and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(params: &ParamStore, config: AdamWConfig, schedule: LrSchedule) -> Self {
        AdamW {
            config,
            schedule,
            state: OptimizerState::new(params),
        }
    }

    pub fn with_state(config: AdamWConfig, schedule: LrSchedule, state: OptimizerState) -> Self {
        AdamW {
            config,
            schedule,
            state,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.schedule.factor(self.state.step + 1)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() || self.state.m.len() != params.len() {
            return Err(Error::Optimizer(format!(
                "expected {} gradients, got {}",
                params.len(),
                grads.len()
            )));
        }
        for (id, name, t) in params.iter() {
            if grads.get(id).shape() != t.shape() || self.state.m[id.index()].shape() != t.shape() {
                return Err(Error::Optimizer(format!("missing gradient for {name}")));
            }
        }
        if !grads.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let lr = self.config.lr * self.schedule.factor(self.state.step);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.state.m[id.index()].data_mut();
            let v = self.state.v[id.index()].data_mut();
            let w = params.get_mut(id).data_mut();
            for j in 0..w.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                w[j] *= 1.0 - lr * weight_decay;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
