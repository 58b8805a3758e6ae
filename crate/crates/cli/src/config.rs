//! Config-file loading and flag merging. A config file holds flat
//! `key = value` lines namespaced as `model.<key>` / `train.<key>` —
//! the same layout a checkpoint embeds — and flags override whatever
//! the file set.

use std::path::Path;

use obiformer_core::{Error, ModelConfig, Result, TrainConfig};

use crate::Overrides;

/// Split a config file into its model and train sections and parse both.
/// Missing file path: both sections fall back to built-in defaults.
pub fn load_file(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    let mut model_text = String::new();
    let mut train_text = String::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("model.") {
                model_text.push_str(rest);
                model_text.push('\n');
            } else if let Some(rest) = line.strip_prefix("train.") {
                train_text.push_str(rest);
                train_text.push('\n');
            } else {
                return Err(Error::Config(format!(
                    "{}: line {}: keys must start with model. or train., got {line:?}",
                    p.display(),
                    lineno + 1
                )));
            }
        }
    }
    Ok((
        ModelConfig::from_kv(&model_text)?,
        TrainConfig::from_kv(&train_text)?,
    ))
}

impl Overrides {
    /// The effective configuration: file values where given, flag values
    /// on top.
    pub fn resolve(&self) -> Result<(ModelConfig, TrainConfig)> {
        let (model, mut train) = load_file(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            train.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            train.epochs = epochs;
        }
        if let Some(lr) = self.lr {
            train.learning_rate = lr;
        }
        if let Some(batch) = self.batch {
            train.batch_size = batch;
        }
        if let Some(a) = self.alpha1 {
            train.weights.a1 = a;
        }
        if let Some(a) = self.alpha2 {
            train.weights.a2 = a;
        }
        if let Some(a) = self.alpha3 {
            train.weights.a3 = a;
        }
        if let Some(a) = self.alpha4 {
            train.weights.a4 = a;
        }
        model.validate()?;
        train.validate()?;
        Ok((model, train))
    }
}
