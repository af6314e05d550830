use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::matrix::DenseMatrix;
use super::param::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay, applied as `θ ← θ − lr·wd·θ`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moment estimates for every parameter of one model.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<DenseMatrix>,
    second: Vec<DenseMatrix>,
}

impl AdamState {
    pub fn new<M: Parameterized + ?Sized>(model: &M, config: AdamConfig) -> Self {
        let shapes: Vec<_> = model.params().iter().map(|(_, p)| p.value.shape()).collect();
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update using the gradients currently stored on `model`.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let mut params = model.params_mut();
        if params.len() != self.first.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{} parameters, optimiser tracks {}", params.len(), self.first.len()),
            });
        }
        for (name, p) in &params {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((_, p), (m, v)) in params.iter_mut().zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            let grads = p.grad.values().to_vec();
            let values = p.value.values_mut();
            for (i, g) in grads.into_iter().enumerate() {
                let mi = &mut m.values_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                let vi = &mut v.values_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = m.values()[i] / bc1;
                let v_hat = v.values()[i] / bc2;
                values[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * values[i]);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` to `floor_lr` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub floor_lr: f64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            total_steps: 20,
            floor_lr: 0.0,
        }
    }
}

impl CosineSchedule {
    /// Learning rate at step `t`; constant at `floor_lr` past `total_steps`.
    pub fn lr(&self, t: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = t.min(self.total_steps) as f64 / self.total_steps as f64;
        self.floor_lr + 0.5 * (self.base_lr - self.floor_lr) * (1.0 + (PI * frac).cos())
    }
}
