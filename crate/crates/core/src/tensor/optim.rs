use std::collections::BTreeMap;

use super::{ParameterSet, Real};
use crate::error::{contract_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.second.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update. Gradients are read but left in place.
pub fn adam_step<T: Real>(params: &mut ParameterSet<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(contract_err!("parameter `{name}` has no gradient"));
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let corr1 = T::c(1.0 - cfg.beta1.powi(t));
    let corr2 = T::c(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::c(cfg.learning_rate), T::c(cfg.epsilon));
    for (name, tensor) in params.iter_mut() {
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); tensor.len()]);
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); tensor.len()]);
        let grad = tensor.grad().expect("checked above").to_vec();
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !tensor.is_finite() {
            return Err(Error::Numeric(format!(
                "parameter `{name}` became non-finite at step {}",
                state.step
            )));
        }
    }
    Ok(())
}
