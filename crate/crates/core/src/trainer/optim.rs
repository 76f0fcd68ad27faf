use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autograd::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay. Moment buffers are
/// created lazily on the first step and then bound to parameter order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update from explicit gradients. Each parameter is replaced by a
    /// fresh leaf holding the new values.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<(), TrainError> {
        if params.len() != grads.len() {
            return Err(TrainError::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TrainError::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || self.m[i].len() != g.len() {
                return Err(TrainError::Shape(format!(
                    "parameter {i} has {} values, gradient {}",
                    p.numel(),
                    g.len()
                )));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.data().to_vec();
            for j in 0..data.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] *= 1.0 - c.lr * c.weight_decay;
                data[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            **p = Tensor::parameter(data, p.shape())?;
        }
        Ok(())
    }

    /// Steps using the gradients accumulated on the parameters (zero where a
    /// parameter received none).
    pub fn step_accumulated(&mut self, params: &mut [&mut Tensor]) -> Result<(), TrainError> {
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        self.step(params, &grads)
    }
}
