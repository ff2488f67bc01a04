//! Adam with optional global gradient-norm clipping.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm the gradient is rescaled to when exceeded.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |_| -> Vec<Tensor> {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            config,
            t: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    /// One bias-corrected update of every trainable parameter. Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<f64> {
        let mut collected = Vec::new();
        for (id, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let g = grads
                .param(id)
                .ok_or_else(|| Error::MissingGradient(format!("trainable parameter {}", p.name)))?;
            if g.shape() != p.value.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: p.value.shape(),
                    rhs: g.shape(),
                });
            }
            collected.push((id, g));
        }
        let norm = libm::sqrt(
            collected
                .iter()
                .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
                .sum(),
        );
        let scale = match self.config.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        self.t += 1;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        for (id, g) in collected {
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let theta = store.get_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i] * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                theta[i] -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        Ok(norm)
    }
}
