use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update to every parameter, then
    /// clears all gradients. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Optimizer(format!("parameter {name:?} has no gradient")));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let n = tensor.numel();
            let grad = tensor.take_grad().expect("checked above");
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::Optimizer(format!(
                    "moment buffers for {name:?} do not match parameter extent {n}"
                )));
            }
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors (`adam.m.<name>`, `adam.v.<name>`),
    /// shaped like their parameters, for checkpointing.
    pub fn export(&self, params: &ModelParams) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for (prefix, map) in [("adam.m.", &self.first), ("adam.v.", &self.second)] {
            for (name, buf) in map {
                let shape = params.get(name)?.shape().to_vec();
                out.push((format!("{prefix}{name}"), Tensor::new(shape, buf.clone())?));
            }
        }
        Ok(out)
    }

    /// Rebuilds state from exported moment tensors.
    pub fn import(config: AdamConfig, step: u64, tensors: &BTreeMap<String, Tensor>) -> Self {
        let mut state = AdamState::new(config);
        state.step = step;
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("adam.m.") {
                state.first.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                state.second.insert(p.to_string(), t.data().to_vec());
            }
        }
        state
    }
}
