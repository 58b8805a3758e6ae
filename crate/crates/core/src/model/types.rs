//! Shared tensor currency types.

use ndarray::Array4;

use crate::error::{Error, Result};

/// A batch of images in NCHW layout, `f32`, nominally in `[0, 1]` for
/// pixel data (network outputs may exceed the range before clamping).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub data: Array4<f32>,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>) -> Self {
        ImageBatch { data }
    }

    /// `(batch, channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    /// Rejects batches containing NaN or infinities.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("{what} contains a non-finite value")));
        }
        Ok(())
    }
}

impl From<Array4<f32>> for ImageBatch {
    fn from(data: Array4<f32>) -> Self {
        ImageBatch { data }
    }
}

/// The pair of per-stage streams: attentive reconstruction features and
/// convolutional glyph features.
#[derive(Clone, Debug)]
pub struct DualStream {
    pub recon: ImageBatch,
    pub glyph: ImageBatch,
}
