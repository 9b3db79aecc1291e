//! Adam with bias correction and a constant learning rate.

use std::collections::BTreeMap;

use trajformer_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub first: ParamStore,
    pub second: ParamStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let mut first = ParamStore::new();
        let mut second = ParamStore::new();
        for (name, t) in params.iter() {
            first.insert(name, Tensor::zeros(t.shape().to_vec()));
            second.insert(name, Tensor::zeros(t.shape().to_vec()));
        }
        Self { first, second, step: 0 }
    }

    pub fn validate_against(&self, params: &ParamStore) -> Result<()> {
        for (name, t) in params.iter() {
            for moments in [&self.first, &self.second] {
                let m = moments.get(name)?;
                if m.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "optimizer moment for {name} has shape {:?}, parameter has {:?}",
                        m.shape(),
                        t.shape()
                    )));
                }
            }
        }
        if self.first.len() != params.len() || self.second.len() != params.len() {
            return Err(Error::Format("optimizer state covers a different parameter set".into()));
        }
        Ok(())
    }
}

/// One update of every parameter in `grads`. Nothing is modified if any
/// gradient holds a non-finite value.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let next = state.step + 1;
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                name: name.clone(),
                step: next,
            });
        }
    }
    state.step = next;
    let bc1 = 1.0 - cfg.beta1.powi(next as i32);
    let bc2 = 1.0 - cfg.beta2.powi(next as i32);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state.first.get_mut(name)?;
        let v = state.second.get_mut(name)?;
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
