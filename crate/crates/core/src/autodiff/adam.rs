//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{DopeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update of `params` in place given matching `grads`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DopeError::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() || params[i].len() != g.len() {
                return Err(DopeError::Shape(format!("parameter group {i} changed size")));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(DopeError::Training(format!(
                    "non-finite gradient in parameter group {i} at entry {j} (step {})",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= c.lr * mh / (vh.sqrt() + c.eps);
                p[j] -= c.lr * c.weight_decay * p[j];
            }
        }
        Ok(())
    }
}
