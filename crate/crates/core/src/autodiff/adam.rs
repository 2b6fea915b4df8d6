use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{ParamId, ParamStore};
use super::tape::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Parameters that received no gradient in a step
/// (absent from [`Gradients`]) are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: HashMap<ParamId, Tensor>,
    second: HashMap<ParamId, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = store.get(id);
            if g.shape() != p.value.shape() {
                return Err(Error::contract(format!(
                    "adam: gradient shape {:?} does not match `{}` {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        let mut ids: Vec<ParamId> = grads.iter().map(|(id, _)| id).collect();
        ids.sort();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let g = grads.get(id).expect("id came from grads");
            let (rows, cols) = g.shape();
            let m = self
                .first
                .entry(id)
                .or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self
                .second
                .entry(id)
                .or_insert_with(|| Tensor::zeros(rows, cols));
            let value = store.value_mut(id);
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = beta1 * m.data()[k] + (1.0 - beta1) * gk;
                let vk = beta2 * v.data()[k] + (1.0 - beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
                value.data_mut()[k] -= update;
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global l2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
