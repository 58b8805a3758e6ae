//! Architecture hyper-parameters and their validation rules.

use crate::error::{Error, Result};

/// Shape of the network. `Default` matches the calibrated configuration
/// documented in the README (encoder depth 4, base width 16).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of downsampling stages `N`; the network has `2N + 1` fusion
    /// blocks (N encoder, 1 bottleneck, N decoder).
    pub encoder_depth: usize,
    /// Channel width at full resolution; doubles at every downsampling.
    pub base_channels: usize,
    /// Attention blocks chained in the reconstruction stream of one stage.
    pub csab_per_block: usize,
    /// Convolutional blocks chained in the glyph stream of one stage.
    pub gsnb_per_block: usize,
    /// Initial value of each learnable attention temperature.
    pub attention_temperature_init: f32,
    /// Channels of the network input and the denoised output.
    pub io_channels: usize,
    /// Channels of the skeleton output.
    pub skeleton_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_depth: 4,
            base_channels: 16,
            csab_per_block: 2,
            gsnb_per_block: 2,
            attention_temperature_init: 1.0,
            io_channels: 3,
            skeleton_channels: 1,
        }
    }
}

impl ModelConfig {
    /// Small configuration used throughout the test suites.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder_depth: 1,
            base_channels: 4,
            ..ModelConfig::default()
        }
    }

    /// Checks every documented constraint, returning a configuration error
    /// naming the first violated one.
    pub fn validate(&self) -> Result<()> {
        if self.encoder_depth < 1 {
            return Err(Error::Config(format!(
                "encoder_depth must be >= 1, got {}",
                self.encoder_depth
            )));
        }
        if self.base_channels < 1 {
            return Err(Error::Config(format!(
                "base_channels must be >= 1, got {}",
                self.base_channels
            )));
        }
        if self.csab_per_block < 1 {
            return Err(Error::Config(format!(
                "csab_per_block must be >= 1, got {}",
                self.csab_per_block
            )));
        }
        if self.gsnb_per_block < 1 {
            return Err(Error::Config(format!(
                "gsnb_per_block must be >= 1, got {}",
                self.gsnb_per_block
            )));
        }
        if !self.attention_temperature_init.is_finite() || self.attention_temperature_init <= 0.0 {
            return Err(Error::Config(format!(
                "attention_temperature_init must be finite and positive, got {}",
                self.attention_temperature_init
            )));
        }
        if self.io_channels < 1 {
            return Err(Error::Config(format!(
                "io_channels must be >= 1, got {}",
                self.io_channels
            )));
        }
        if self.skeleton_channels < 1 {
            return Err(Error::Config(format!(
                "skeleton_channels must be >= 1, got {}",
                self.skeleton_channels
            )));
        }
        Ok(())
    }

    /// Channel width of stage `level` (0 = full resolution).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// The spatial extents an input must be divisible by.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.encoder_depth
    }

    /// Hidden width of the gated feed-forward at channel count `c`
    /// (expansion factor 2.66, floored, at least 1).
    pub fn ffn_hidden(c: usize) -> usize {
        ((c as f64) * 2.66).floor().max(1.0) as usize
    }

    /// Bottleneck width of the fusion gate at channel count `c`.
    pub fn skff_reduced(c: usize) -> usize {
        (c / 8).max(4)
    }

    /// Serialise to `key=value` lines (stable order) for checkpoints.
    pub fn to_kv(&self) -> String {
        format!(
            "encoder_depth={}\nbase_channels={}\ncsab_per_block={}\ngsnb_per_block={}\nattention_temperature_init={}\nio_channels={}\nskeleton_channels={}\n",
            self.encoder_depth,
            self.base_channels,
            self.csab_per_block,
            self.gsnb_per_block,
            self.attention_temperature_init,
            self.io_channels,
            self.skeleton_channels
        )
    }

    /// Parse from `key=value` lines; unknown keys are ignored so the same
    /// text block can carry training metadata.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "malformed config line {}: {line:?} (expected key=value)",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("invalid value for {key}: {v:?}")))
            };
            match key {
                "encoder_depth" => cfg.encoder_depth = parse_usize(value)?,
                "base_channels" => cfg.base_channels = parse_usize(value)?,
                "csab_per_block" => cfg.csab_per_block = parse_usize(value)?,
                "gsnb_per_block" => cfg.gsnb_per_block = parse_usize(value)?,
                "attention_temperature_init" => {
                    cfg.attention_temperature_init = value.parse().map_err(|_| {
                        Error::Config(format!("invalid value for {key}: {value:?}"))
                    })?
                }
                "io_channels" => cfg.io_channels = parse_usize(value)?,
                "skeleton_channels" => cfg.skeleton_channels = parse_usize(value)?,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
