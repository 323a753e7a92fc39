use serde::{Deserialize, Serialize};

use super::graph::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for every parameter in a store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }
}

/// Bias-corrected Adam update, applied in place.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Domain(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::Domain(format!(
                "gradient shape {:?} does not match parameter {} {:?}",
                g.shape(),
                params.name(id),
                params.get(id).shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient for parameter {} at step {}",
                params.name(id),
                state.step + 1
            )));
        }
    }

    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].values();
        let m = state.m[i].values_mut();
        let v = state.v[i].values_mut();
        for (j, pv) in p.values_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *pv -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
