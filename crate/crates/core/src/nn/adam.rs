//! Adam with bias-corrected moments.

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5.3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for every parameter tensor plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &TensorStore, config: AdamConfig) -> Self {
        let zeros = |t: &Tensor| vec![0.0; t.len()];
        Self {
            config,
            step: 0,
            first_moment: params.tensors().iter().map(zeros).collect(),
            second_moment: params.tensors().iter().map(zeros).collect(),
        }
    }

    /// One update of every parameter with its gradient.
    pub fn step(&mut self, params: &mut TensorStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters ({} moment buffers)",
                grads.len(),
                params.len(),
                self.first_moment.len()
            )));
        }
        for ((p, g), m) in params.tensors().iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.len() != m.len() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            adam_update(
                p.data_mut(),
                g.data(),
                &mut self.first_moment[i],
                &mut self.second_moment[i],
                self.step,
                &self.config,
            );
        }
        Ok(())
    }
}

/// Applies step `t` (1-based) of Adam to one buffer.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
