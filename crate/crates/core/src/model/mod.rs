//! Network architecture: configuration, parameter storage, and forward
//! evaluation of every block.
//!
//! The network is a U-shaped encoder–decoder. A 3x3 input projector lifts
//! the image to `base_channels` features; `encoder_depth` stages (each a
//! fusion block followed by a strided 4x4 downsampling convolution) halve
//! resolution while doubling width; a bottleneck stage sits at the lowest
//! scale; mirrored decoder stages upsample with transposed 2x2
//! convolutions and add the corresponding encoder skip. Every stage runs
//! two parallel streams — chained channel-attention blocks and chained
//! convolutional glyph blocks — merged by a selective fusion gate. Two 3x3
//! heads produce the outputs: the denoised image from the shallow features
//! plus the final reconstruction stream, and the skeleton map from the
//! final glyph stream.

mod config;
mod init;
mod store;
mod types;
pub mod wiring;

pub use config::ModelConfig;
pub use init::{build_model, count_parameters, stage_prefixes};
pub use store::ParameterStore;
pub use types::{DualStream, ImageBatch};
pub use wiring::{BnUpdate, Graph, Mode};

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::tape::Var;

/// Everything the full forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Restored image, same shape as the input (unclamped).
    pub denoised: ImageBatch,
    /// Skeleton map logits at input resolution (unclamped).
    pub skeleton: ImageBatch,
    /// Stream outputs of the final decoder stage that feed the two heads.
    pub final_streams: DualStream,
}

fn to_batch(graph: &Graph<'_, f32>, v: Var) -> ImageBatch {
    let arr = graph
        .tape
        .value(v)
        .to_owned()
        .into_dimensionality()
        .expect("block outputs are rank 4");
    ImageBatch::new(arr)
}

fn expect_channels(store: &ParameterStore, weight: &str, axis: usize, got: usize) -> Result<()> {
    let w = store.param(weight)?;
    let want = w.shape()[axis];
    if want != got {
        return Err(Error::Shape(format!(
            "input has {got} channels but {weight} expects {want}"
        )));
    }
    Ok(())
}

/// Channel-wise self-attention over the feature map `x` using the
/// parameter group at `prefix` (e.g. `"enc0.csab0"`). Query, key, and
/// value come from pointwise + depthwise convolutions; the channel-by-
/// channel similarity map, scaled by the learnable temperature, is
/// row-softmaxed and applied to the value matrix.
pub fn channel_self_attention(
    store: &ParameterStore,
    prefix: &str,
    x: &ImageBatch,
) -> Result<ImageBatch> {
    Ok(channel_self_attention_with_map(store, prefix, x)?.0)
}

/// As [`channel_self_attention`], additionally returning the attention
/// map of shape `(batch, channels, channels)`.
pub fn channel_self_attention_with_map(
    store: &ParameterStore,
    prefix: &str,
    x: &ImageBatch,
) -> Result<(ImageBatch, Array3<f32>)> {
    x.check_finite("attention input")?;
    expect_channels(store, &format!("{prefix}.q_pw.weight"), 1, x.dims().1)?;
    let mut graph = Graph::<f32>::new(store, Mode::Eval, false);
    let input = graph.input(x.data.clone().into_dyn());
    let (out, map) = graph.csa(prefix, input)?;
    let map = graph
        .tape
        .value(map)
        .to_owned()
        .into_dimensionality()
        .expect("attention map is rank 3");
    Ok((to_batch(&graph, out), map))
}

/// One channel self-attention block (pre-norm attention with projection
/// and residual, then a pre-norm gated feed-forward with residual).
pub fn csab_forward(store: &ParameterStore, prefix: &str, x: &ImageBatch) -> Result<ImageBatch> {
    x.check_finite("block input")?;
    expect_channels(store, &format!("{prefix}.q_pw.weight"), 1, x.dims().1)?;
    let mut graph = Graph::<f32>::new(store, Mode::Eval, false);
    let input = graph.input(x.data.clone().into_dyn());
    let out = graph.csab(prefix, input)?;
    Ok(to_batch(&graph, out))
}

/// One glyph-stream block (conv + batch-norm + ReLU + conv + batch-norm
/// with identity residual). `mode` selects batch statistics (training) or
/// the stored running statistics (evaluation).
pub fn gsnb_forward(
    store: &ParameterStore,
    prefix: &str,
    x: &ImageBatch,
    mode: Mode,
) -> Result<ImageBatch> {
    x.check_finite("block input")?;
    expect_channels(store, &format!("{prefix}.conv1.weight"), 1, x.dims().1)?;
    let mut graph = Graph::<f32>::new(store, mode, false);
    let input = graph.input(x.data.clone().into_dyn());
    let out = graph.gsnb(prefix, input)?;
    Ok(to_batch(&graph, out))
}

/// Result of the selective fusion gate.
#[derive(Clone, Debug)]
pub struct SkffOutput {
    /// Reconstruction stream re-weighted by its attention vector.
    pub recon: ImageBatch,
    /// Glyph stream re-weighted by the complementary attention vector.
    pub glyph: ImageBatch,
    /// Sum of the two re-weighted streams.
    pub fused: ImageBatch,
    /// Per-(batch, channel) attention weight of the reconstruction stream.
    pub attn_recon: ndarray::Array2<f32>,
    /// Complementary weight of the glyph stream.
    pub attn_glyph: ndarray::Array2<f32>,
}

/// Selective fusion: global-average pooling of the stream sum, a
/// bottleneck 1x1 convolution, and per-channel two-way softmax weights
/// applied back to each stream.
pub fn skff_fuse(
    store: &ParameterStore,
    prefix: &str,
    recon: &ImageBatch,
    glyph: &ImageBatch,
) -> Result<SkffOutput> {
    recon.check_finite("fusion input")?;
    glyph.check_finite("fusion input")?;
    if recon.dims() != glyph.dims() {
        return Err(Error::Shape(format!(
            "fusion streams disagree: {:?} vs {:?}",
            recon.dims(),
            glyph.dims()
        )));
    }
    expect_channels(store, &format!("{prefix}.fuse.weight"), 1, recon.dims().1)?;
    let mut graph = Graph::<f32>::new(store, Mode::Eval, false);
    let r = graph.input(recon.data.clone().into_dyn());
    let g = graph.input(glyph.data.clone().into_dyn());
    let (fr, fg, fused, ar, ag) = graph.skff(prefix, r, g)?;
    let (b, c, _, _) = recon.dims();
    let flatten = |v: Var| -> ndarray::Array2<f32> {
        graph
            .tape
            .value(v)
            .to_owned()
            .into_shape_with_order(ndarray::IxDyn(&[b, c]))
            .expect("attention weights are (B, C, 1, 1)")
            .into_dimensionality()
            .unwrap()
    };
    Ok(SkffOutput {
        attn_recon: flatten(ar),
        attn_glyph: flatten(ag),
        recon: to_batch(&graph, fr),
        glyph: to_batch(&graph, fg),
        fused: to_batch(&graph, fused),
    })
}

/// One full fusion stage at prefix `enc{i}`, `mid`, or `dec{i}`: the
/// attention chain and glyph chain over `x`, selectively fused. Returns
/// the fused stage output plus the two pre-fusion stream outputs.
pub fn ofb_forward(
    cfg: &ModelConfig,
    store: &ParameterStore,
    prefix: &str,
    x: &ImageBatch,
    mode: Mode,
) -> Result<(ImageBatch, DualStream)> {
    cfg.validate()?;
    x.check_finite("stage input")?;
    expect_channels(store, &format!("{prefix}.csab0.q_pw.weight"), 1, x.dims().1)?;
    let mut graph = Graph::<f32>::new(store, mode, false);
    let input = graph.input(x.data.clone().into_dyn());
    let (fused, recon, glyph) = graph.ofb(cfg, prefix, input)?;
    Ok((
        to_batch(&graph, fused),
        DualStream {
            recon: to_batch(&graph, recon),
            glyph: to_batch(&graph, glyph),
        },
    ))
}

/// Direction of a resampling convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleDir {
    /// Strided 4x4 convolution: halves H and W, doubles channels.
    Down,
    /// Transposed 2x2 convolution: doubles H and W, halves channels.
    Up,
}

/// Apply the resampling convolution named `name` (e.g. `"down0"`, `"up0"`).
pub fn resample(
    store: &ParameterStore,
    name: &str,
    x: &ImageBatch,
    dir: ResampleDir,
) -> Result<ImageBatch> {
    x.check_finite("resample input")?;
    let (_, c, h, w) = x.dims();
    match dir {
        ResampleDir::Down => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Shape(format!(
                    "downsampling needs even extents, got {h}x{w}"
                )));
            }
            expect_channels(store, &format!("{name}.weight"), 1, c)?;
        }
        ResampleDir::Up => {
            expect_channels(store, &format!("{name}.weight"), 0, c)?;
        }
    }
    let mut graph = Graph::<f32>::new(store, Mode::Eval, false);
    let input = graph.input(x.data.clone().into_dyn());
    let out = match dir {
        ResampleDir::Down => graph.downsample(name, input)?,
        ResampleDir::Up => graph.upsample(name, input)?,
    };
    Ok(to_batch(&graph, out))
}

fn validate_network_input(cfg: &ModelConfig, x: &ImageBatch) -> Result<()> {
    cfg.validate()?;
    x.check_finite("network input")?;
    let (b, c, h, w) = x.dims();
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if c != cfg.io_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, configuration expects {}",
            cfg.io_channels
        )));
    }
    let m = cfg.spatial_multiple();
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!(
            "spatial extents must be positive multiples of {m} for encoder_depth {}, got {h}x{w}",
            cfg.encoder_depth
        )));
    }
    Ok(())
}

/// Full forward pass in the requested mode. The same input in `Eval` mode
/// always produces the same output; `Train` mode differs only in which
/// statistics the glyph-stream normalisation uses.
pub fn forward(
    cfg: &ModelConfig,
    store: &ParameterStore,
    x: &ImageBatch,
    mode: Mode,
) -> Result<ForwardOutput> {
    validate_network_input(cfg, x)?;
    let mut graph = Graph::<f32>::new(store, mode, false);
    let input = graph.input(x.data.clone().into_dyn());
    let (denoised, skeleton, recon, glyph) = graph.network(cfg, input)?;
    Ok(ForwardOutput {
        denoised: to_batch(&graph, denoised),
        skeleton: to_batch(&graph, skeleton),
        final_streams: DualStream {
            recon: to_batch(&graph, recon),
            glyph: to_batch(&graph, glyph),
        },
    })
}

/// A training-mode forward pass left open on its tape so the caller can
/// stack a loss on top and run backward. Exposes the output nodes and the
/// graph (for bound parameter handles and batch-norm updates).
pub struct OpenForward<'s, T: crate::tape::Scalar> {
    pub graph: Graph<'s, T>,
    pub input: Var,
    pub denoised: Var,
    pub skeleton: Var,
}

/// Build the full network graph with trainable parameter leaves; used by
/// the training engine and the gradient checker.
pub fn forward_open<'s, T: crate::tape::Scalar>(
    cfg: &ModelConfig,
    store: &'s ParameterStore,
    x: &ImageBatch,
    mode: Mode,
    trainable: bool,
) -> Result<OpenForward<'s, T>> {
    validate_network_input(cfg, x)?;
    let mut graph = Graph::<T>::new(store, mode, trainable);
    let input = graph.input(x.data.mapv(T::from_f32).into_dyn());
    let (denoised, skeleton, _, _) = graph.network(cfg, input)?;
    Ok(OpenForward {
        graph,
        input,
        denoised,
        skeleton,
    })
}
