//! Attentive denoising and glyph-skeleton extraction for degraded rubbing
//! images.
//!
//! The crate implements a U-shaped encoder–decoder whose stages pair a
//! channel-wise self-attention stream (reconstruction) with a plain
//! convolutional stream (glyph shape), fused by a selective-kernel gate.
//! Around the network it provides the full workflow: noise synthesis and
//! skeleton ground-truth generation, composite PSNR/perceptual training,
//! checkpointing, metric evaluation, and analytic FLOP accounting.
//!
//! Everything runs on the CPU over `ndarray` tensors through a small
//! reverse-mode autodiff tape; results are deterministic for a fixed seed.

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod records;
pub mod tape;
pub mod train;

pub use data::{DatasetManifest, NoiseKind, NoiseSpec, SampleRecord};
pub use error::{Error, Result};
pub use loss::{FeatureExtractor, FeatureTap, LossWeights};
pub use model::{
    build_model, count_parameters, forward, DualStream, ForwardOutput, ImageBatch, Mode,
    ModelConfig, ParameterStore,
};
pub use metrics::{
    count_flops, evaluate, psnr, ssim, EfficiencyReport, FlopConvention, MetricsReport,
};
pub use train::{gradient_check, GradCheckOptions, GradCheckReport, TrainConfig, Trainer};
