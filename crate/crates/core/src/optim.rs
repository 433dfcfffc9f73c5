use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::moe::{GradBundle, MoeModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

fn lr_start() -> f64 {
    3e-4
}
fn lr_end() -> f64 {
    1e-4
}
fn decay_fraction() -> f64 {
    0.5
}
fn max_grad_norm() -> Option<f64> {
    Some(0.5)
}

/// Optimizer settings with a linear learning-rate ramp from `lr_start` to
/// `lr_end` over the first `decay_fraction` of every task, constant after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    #[serde(default = "lr_start")]
    pub lr_start: f64,
    #[serde(default = "lr_end")]
    pub lr_end: f64,
    #[serde(default = "decay_fraction")]
    pub decay_fraction: f64,
    #[serde(default = "max_grad_norm")]
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr_start: lr_start(),
            lr_end: lr_end(),
            decay_fraction: decay_fraction(),
            max_grad_norm: max_grad_norm(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= 0.0 && self.lr_end >= 0.0) {
            return Err(Error::Config("optimizer learning rates must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(Error::Config("optimizer.decay_fraction must lie in [0, 1]".into()));
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::Config("optimizer.max_grad_norm must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` of a task segment of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let ramp = self.decay_fraction * total as f64;
        if ramp <= 0.0 || step as f64 >= ramp {
            return self.lr_end;
        }
        let t = step as f64 / ramp;
        self.lr_start + (self.lr_end - self.lr_start) * t
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: Option<f64>) -> f64 {
    let total = grads.iter().map(|g| norm(g).powi(2)).sum::<f64>().sqrt();
    if let Some(m) = max_norm {
        if total > m {
            let c = m / total;
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= c));
        }
    }
    total
}

/// Adam or SGD state for a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { params } else { 0 };
        Optimizer { kind, m: vec![0.0; state], v: vec![0.0; state], t: 0 }
    }

    /// Descends along `grad` with rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let b1 = 1.0 - BETA1.powi(self.t as i32);
                let b2 = 1.0 - BETA2.powi(self.t as i32);
                for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= lr * (*m / b1) / ((*v / b2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Applies one optimizer step of a gradient bundle to a model.
pub fn step_model(opt: &mut Optimizer, model: &mut MoeModel, grad: &GradBundle, lr: f64) -> Result<()> {
    let mut params = model.flat_params();
    opt.step(&mut params, &grad.flatten(), lr);
    model.set_flat_params(&params)
}
