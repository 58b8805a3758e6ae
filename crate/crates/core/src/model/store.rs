//! Named tensor storage for model state.
//!
//! Trainable parameters and non-trainable buffers (batch-norm running
//! statistics) live in two ordered maps. Iteration order is insertion
//! order, which the builder keeps deterministic, so optimizers, the
//! gradient checker, and the checkpoint format all see the same stable
//! sequence of names.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::error::{Error, Result};

/// Ordered collection of named `f32` tensors: the single source of truth
/// for model state.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: IndexMap<String, ArrayD<f32>>,
    buffers: IndexMap<String, ArrayD<f32>>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a trainable parameter. Names must be unique across both maps.
    pub fn insert_param(&mut self, name: &str, value: ArrayD<f32>) -> Result<()> {
        self.check_new_name(name)?;
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Insert a non-trainable buffer (e.g. a running statistic).
    pub fn insert_buffer(&mut self, name: &str, value: ArrayD<f32>) -> Result<()> {
        self.check_new_name(name)?;
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    fn check_new_name(&self, name: &str) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate tensor name {name:?}")));
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name:?}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut ArrayD<f32>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name:?}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown buffer {name:?}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut ArrayD<f32>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("unknown buffer {name:?}")))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Trainable parameters in insertion order.
    pub fn iter_params(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Buffers in insertion order.
    pub fn iter_buffers(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_buffers(&self) -> usize {
        self.buffers.len()
    }

    /// Total scalar count across all trainable parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Verify every stored value is finite.
    pub fn check_finite(&self) -> Result<()> {
        for (name, arr) in self.params.iter().chain(self.buffers.iter()) {
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "tensor {name:?} contains a non-finite value"
                )));
            }
        }
        Ok(())
    }
}
