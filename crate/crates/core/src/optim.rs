//! Trainable parameters and the ADAM optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn accumulate(&mut self, grad: &Tensor) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(contract(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                grad.shape(),
                self.value.shape()
            )));
        }
        self.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First/second moment estimates for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Param>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.value.numel()], vec![0.0; p.value.numel()]))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &[f32] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f32] {
        &self.v[index]
    }

    /// One bias-corrected ADAM update over all parameters, then zeroes their
    /// gradients. Parameters must be passed in the order used at construction.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.t as i32;
        let bc1 = (1.0 - (beta1 as f64).powi(t)) as f32;
        let bc2 = (1.0 - (beta2 as f64).powi(t)) as f32;
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = match (self.m.get_mut(i), self.v.get_mut(i)) {
                (Some(m), Some(v)) if m.len() == p.value.numel() => (m, v),
                _ => {
                    return Err(contract(format!(
                        "parameter {i} does not match the optimizer state"
                    )))
                }
            };
            let Param { value, grad } = p;
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            grad.data_mut().fill(0.0);
            count += 1;
        }
        if count != self.m.len() {
            return Err(contract(format!(
                "optimizer tracks {} parameters, step received {count}",
                self.m.len()
            )));
        }
        Ok(())
    }
}
