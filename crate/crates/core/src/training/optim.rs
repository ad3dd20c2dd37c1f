use std::f64::consts::PI;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

/// Learning rate of the online parameters at `step`: linear warm-up from 0 to
/// `base_lr·N/256`, then cosine decay reaching 0 at `cfg.steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(Error::Contract(format!("step {step} beyond the last step {}", cfg.steps)));
    }
    let peak = cfg.base_lr * cfg.batch_size as f64 / 256.0;
    if step < cfg.warmup_steps {
        return Ok(peak * step as f64 / cfg.warmup_steps as f64);
    }
    let span = cfg.steps - cfg.warmup_steps;
    if span == 0 {
        return Ok(peak);
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}

/// The transformer encoder's rate ignores the schedule.
pub fn transformer_lr(cfg: &TrainConfig) -> f64 {
    cfg.transformer_lr
}

/// Heavy-ball SGD state for one module: `v ← μ·v + g; θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new<M: Module>(module: &M, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: module.param_tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step<M: Module>(&mut self, module: &mut M, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            )));
        }
        for (v, g) in self.velocity.iter_mut().zip(grads) {
            if v.shape() != g.shape() {
                return Err(Error::shape("sgd", v.shape(), g.shape()));
            }
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
        }
        module.update_params(&self.velocity, &mut |p, v| {
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        });
        Ok(())
    }
}
