//! Adam with decoupled weight decay over named parameter tensors.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::ParameterStore;

/// Decay applies to convolution/projection kernels only; norm affines,
/// biases, and attention temperatures are excluded.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Adam with decoupled weight decay. Moment estimates are kept in f32
/// (so checkpoints round-trip bit-exactly) while the per-element update
/// itself is computed in f64.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed update steps (the bias-correction clock).
    pub steps: u64,
    first_moment: IndexMap<String, ArrayD<f32>>,
    second_moment: IndexMap<String, ArrayD<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        }
    }

    /// Apply one update from per-parameter gradients. Missing moment
    /// buffers are created as zeros on first touch; decayed parameters
    /// additionally shrink toward zero by `lr * weight_decay` of their
    /// pre-update value.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &[(String, ArrayD<f32>)],
        lr: f64,
    ) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        self.steps += 1;
        let t = self.steps;
        let bias1 = 1.0 - self.beta1.powi(t as i32);
        let bias2 = 1.0 - self.beta2.powi(t as i32);
        for (name, grad) in grads {
            let weight = store.param_mut(name)?;
            if grad.shape() != weight.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    grad.shape(),
                    weight.shape()
                )));
            }
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            for (((w, g), m), v) in weight
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g64 = *g as f64;
                let m64 = self.beta1 * (*m as f64) + (1.0 - self.beta1) * g64;
                let v64 = self.beta2 * (*v as f64) + (1.0 - self.beta2) * g64 * g64;
                *m = m64 as f32;
                *v = v64 as f32;
                let m_hat = (*m as f64) / bias1;
                let v_hat = (*v as f64) / bias2;
                let w64 = *w as f64;
                *w = (w64 - lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * w64)) as f32;
            }
        }
        Ok(())
    }

    /// Moment tensors for checkpointing, in insertion order.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>, &ArrayD<f32>)> {
        self.first_moment
            .iter()
            .map(|(k, m)| (k.as_str(), m, &self.second_moment[k]))
    }

    /// Restore moment tensors saved by [`AdamW::moments`].
    pub fn restore_moments(
        &mut self,
        first: IndexMap<String, ArrayD<f32>>,
        second: IndexMap<String, ArrayD<f32>>,
        steps: u64,
    ) -> Result<()> {
        if first.len() != second.len()
            || first.keys().any(|k| !second.contains_key(k))
        {
            return Err(Error::Config(
                "optimizer moment tensors do not pair up".into(),
            ));
        }
        for (k, m) in &first {
            if second[k].shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "optimizer moments for {k} disagree in shape"
                )));
            }
        }
        self.first_moment = first;
        self.second_moment = second;
        self.steps = steps;
        Ok(())
    }
}
