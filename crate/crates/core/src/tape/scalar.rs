//! Floating-point abstraction used by the computation tape.
//!
//! Training runs in `f32`; gradient verification re-instantiates the same
//! graph in `f64` so that central finite differences have enough precision
//! to resolve the analytic gradients.

use ndarray::{LinalgScalar, NdFloat};

/// Element type accepted by the tape: a real float with linear-algebra
/// support and lossless conversion to/from `f64` for reporting.
pub trait Scalar: NdFloat + LinalgScalar + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self as f32
    }
}
