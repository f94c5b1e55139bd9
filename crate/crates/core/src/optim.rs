//! Adam with bias-corrected moment estimates.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: IndexMap<String, Vec<f64>>,
    pub second: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(n, t)| (n.clone(), vec![0.0; t.len()])).collect();
        Self {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub(crate) fn as_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(self.step as f64))];
        for (prefix, map) in [("adam.m.", &self.first), ("adam.v.", &self.second)] {
            for (name, v) in map {
                out.push((format!("{prefix}{name}"), Tensor::new(vec![v.len()], v.clone()).expect("1-d")));
            }
        }
        out
    }
}

/// One Adam update. Any non-finite gradient aborts before touching state.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, t) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for parameter `{name}`")))?;
        if g.len() != t.len() {
            return Err(Error::shape(format!("gradient of `{name}`"), &[t.len()], &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, tensor) in params.iter_mut() {
        let g = &grads[name];
        let m = state.first.get_mut(name).expect("state tracks every parameter");
        let v = state.second.get_mut(name).expect("state tracks every parameter");
        for (((p, gi), mi), vi) in tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
