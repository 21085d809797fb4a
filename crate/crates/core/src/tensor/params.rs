use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{contract_err, shape_err, Result};

/// Named trainable tensors. Names are unique and iterate in sorted order, so
/// serialization and optimizer updates are deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T: Real = f32> {
    entries: BTreeMap<String, Tensor<T>>,
    version: u32,
}

impl<T: Real> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            entries: BTreeMap::new(),
            version: super::CHECKPOINT_VERSION,
        }
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(contract_err!("duplicate parameter name `{name}`"));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| contract_err!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::clear_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            version: self.version,
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParameterSet<T> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            version: self.version,
        }
    }

    /// Fails unless `other` has exactly the same names with the same shapes.
    pub fn check_congruent<U: Real>(&self, other: &ParameterSet<U>) -> Result<()> {
        for (name, t) in &self.entries {
            match other.get(name) {
                None => return Err(shape_err!("parameter `{name}` is missing")),
                Some(o) if o.shape() != t.shape() => {
                    return Err(shape_err!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    ))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(shape_err!("unexpected parameter `{extra}`"));
        }
        Ok(())
    }
}
