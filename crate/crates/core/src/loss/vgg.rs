//! Frozen convolutional feature extractor for the perceptual loss.
//!
//! The extractor mirrors the convolutional prefix of a VGG-16 classifier:
//! blocks of 3x3 convolutions with ReLU, separated by 2x2 max-pooling,
//! tapped after a configurable block's last activation. Weights come from
//! a tensor container on disk (see [`crate::records`]); trained ImageNet
//! weights are expected for meaningful perceptual distances, but any
//! tensor set with the right naming scheme loads, and a seeded random
//! extractor is provided for tests and gradient checks, where a fixed
//! random projection serves the same mathematical role.

use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD, IxDyn};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::records;
use crate::tape::{Scalar, Tape, Var};

/// Magic bytes of an extractor weight container.
pub const WEIGHTS_MAGIC: [u8; 4] = *b"OBIV";
/// Container version this build reads and writes.
pub const WEIGHTS_VERSION: u32 = 1;
/// File name looked up inside the cache directory.
pub const WEIGHTS_FILE: &str = "vgg16_features.bin";
/// Environment variable naming the cache directory.
pub const CACHE_ENV: &str = "OBIFORMER_CACHE";

/// Per-channel statistics the extractor normalises its input with
/// (the canonical ImageNet values); callers pass plain `[0,1]` images.
const INPUT_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const INPUT_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Number of 3x3 convolutions in each block of the extractor prefix.
const BLOCK_CONVS: [usize; 3] = [2, 2, 3];

/// Which activation the features are read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeatureTap {
    /// After the second convolution of the first block (full resolution).
    Shallow,
    /// After the second convolution of the second block (half resolution).
    Mid,
    /// After the third convolution of the third block (quarter
    /// resolution). The default: a common balance of texture and
    /// structure for perceptual losses.
    #[default]
    Deep,
}

impl FeatureTap {
    /// Number of convolution blocks evaluated for this tap.
    pub fn blocks(self) -> usize {
        match self {
            FeatureTap::Shallow => 1,
            FeatureTap::Mid => 2,
            FeatureTap::Deep => 3,
        }
    }

    /// The conventional layer label (`relu1_2`, `relu2_2`, `relu3_3`).
    pub fn label(self) -> &'static str {
        match self {
            FeatureTap::Shallow => "relu1_2",
            FeatureTap::Mid => "relu2_2",
            FeatureTap::Deep => "relu3_3",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "relu1_2" | "shallow" => Ok(FeatureTap::Shallow),
            "relu2_2" | "mid" => Ok(FeatureTap::Mid),
            "relu3_3" | "deep" => Ok(FeatureTap::Deep),
            other => Err(Error::Config(format!(
                "unknown feature tap {other:?} (expected relu1_2, relu2_2, or relu3_3)"
            ))),
        }
    }

    /// Record-name stems of every convolution this tap needs, in order,
    /// grouped by block: `conv1_1, conv1_2 | conv2_1, ... | conv3_3`.
    fn conv_names(self) -> Vec<Vec<String>> {
        (1..=self.blocks())
            .map(|b| {
                (1..=BLOCK_CONVS[b - 1])
                    .map(|i| format!("conv{b}_{i}"))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug)]
struct ConvLayer {
    weight: ArrayD<f32>,
    bias: ArrayD<f32>,
}

/// A frozen feature extractor; immutable once constructed.
#[derive(Debug)]
pub struct FeatureExtractor {
    /// Convolutions grouped by block; 2x2 max-pooling sits between blocks.
    blocks: Vec<Vec<ConvLayer>>,
    tap: FeatureTap,
    /// Where the weights came from (for reports and error messages).
    origin: String,
}

impl FeatureExtractor {
    /// Load extractor weights from an explicit container file.
    ///
    /// The container must hold `convB_I.weight` of shape
    /// `(c_out, c_in, 3, 3)` and `convB_I.bias` of shape `(c_out,)` for
    /// every convolution the tap needs, chained so each layer's input
    /// width matches its predecessor's output width, starting at 3.
    pub fn from_file(path: &Path, tap: FeatureTap) -> Result<Self> {
        let container = records::read_container_file(path, WEIGHTS_MAGIC)?;
        if container.version != WEIGHTS_VERSION {
            return Err(Error::format(
                path,
                format!(
                    "unsupported weight container version {} (this build reads {})",
                    container.version, WEIGHTS_VERSION
                ),
            ));
        }
        let mut blocks = Vec::new();
        let mut expect_in = 3usize;
        for names in tap.conv_names() {
            let mut block = Vec::new();
            for stem in names {
                let weight = container
                    .tensors
                    .get(&format!("{stem}.weight"))
                    .ok_or_else(|| {
                        Error::format(path, format!("missing tensor {stem}.weight"))
                    })?
                    .clone();
                let bias = container
                    .tensors
                    .get(&format!("{stem}.bias"))
                    .ok_or_else(|| Error::format(path, format!("missing tensor {stem}.bias")))?
                    .clone();
                let dims = weight.shape().to_vec();
                if dims.len() != 4 || dims[1] != expect_in || dims[2] != 3 || dims[3] != 3 {
                    return Err(Error::format(
                        path,
                        format!(
                            "tensor {stem}.weight has shape {dims:?}, expected ({}, {expect_in}, 3, 3)",
                            if dims.is_empty() { 0 } else { dims[0] }
                        ),
                    ));
                }
                if bias.shape() != [dims[0]] {
                    return Err(Error::format(
                        path,
                        format!("tensor {stem}.bias does not match {stem}.weight"),
                    ));
                }
                if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::format(
                        path,
                        format!("tensor group {stem} contains non-finite values"),
                    ));
                }
                expect_in = dims[0];
                block.push(ConvLayer { weight, bias });
            }
            blocks.push(block);
        }
        Ok(FeatureExtractor {
            blocks,
            tap,
            origin: path.display().to_string(),
        })
    }

    /// Resolve the weight file from the cache directory named by the
    /// `OBIFORMER_CACHE` environment variable. Absence is a hard error
    /// explaining how to provide the weights — nothing is downloaded.
    pub fn from_cache(tap: FeatureTap) -> Result<Self> {
        let dir = std::env::var_os(CACHE_ENV).ok_or_else(|| {
            Error::Resource(format!(
                "no feature-extractor weights: set {CACHE_ENV} to a directory containing \
                 {WEIGHTS_FILE} (a {:?} tensor container with conv1_1..conv3_3 \
                 weights), or pass an explicit weight path",
                String::from_utf8_lossy(&WEIGHTS_MAGIC)
            ))
        })?;
        let path = PathBuf::from(dir).join(WEIGHTS_FILE);
        if !path.exists() {
            return Err(Error::Resource(format!(
                "feature-extractor weights not found at {}: place {WEIGHTS_FILE} there \
                 or pass an explicit weight path",
                path.display()
            )));
        }
        Self::from_file(&path, tap)
    }

    /// A deterministic random extractor at one-eighth the classifier's
    /// channel widths. A frozen random projection preserves feature
    /// differences well enough for tests, composition oracles, and
    /// gradient checks, without shipping trained weights.
    pub fn seeded_random(tap: FeatureTap, seed: u64) -> Self {
        let widths: [&[usize]; 3] = [&[8, 8], &[16, 16], &[32, 32, 32]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut c_in = 3usize;
        for block_widths in widths.iter().take(tap.blocks()) {
            let mut block = Vec::new();
            for &c_out in block_widths.iter() {
                let fan_in = c_in * 9;
                let bound = (1.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let data: Vec<f32> = (0..c_out * c_in * 9)
                    .map(|_| dist.sample(&mut rng) as f32)
                    .collect();
                let weight =
                    ArrayD::from_shape_vec(IxDyn(&[c_out, c_in, 3, 3]), data).expect("shape");
                let bias = ArrayD::from_elem(IxDyn(&[c_out]), 0.0f32);
                block.push(ConvLayer { weight, bias });
                c_in = c_out;
            }
            blocks.push(block);
        }
        FeatureExtractor {
            blocks,
            tap,
            origin: format!("seeded-random(seed={seed})"),
        }
    }

    pub fn tap(&self) -> FeatureTap {
        self.tap
    }

    /// Extractor parameters never receive gradient updates.
    pub fn frozen(&self) -> bool {
        true
    }

    /// Human-readable weight provenance.
    pub fn origin(&self) -> &str {
        &self.origin
    }

    /// Spatial extents must stay positive through the pooling stages.
    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!(
                "feature extraction expects (B, 3, H, W), got {shape:?}"
            )));
        }
        let need = 1 << (self.tap.blocks() - 1);
        if shape[2] < need || shape[3] < need {
            return Err(Error::Shape(format!(
                "input {}x{} too small for {} pooling stages",
                shape[2],
                shape[3],
                self.tap.blocks() - 1
            )));
        }
        Ok(())
    }

    /// Build the feature chain on a tape. `x` must be `(B, 3, H, W)` in
    /// `[0,1]`; normalisation happens inside. The extractor's weights are
    /// bound as non-trainable leaves, so gradients flow only to `x`.
    pub fn features_on<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let scale = Array1::from_iter(INPUT_STD.iter().map(|&s| T::from_f32(1.0 / s)));
        let shift = Array1::from_iter(INPUT_MEAN.iter().map(|&m| T::from_f32(m)));
        let mut cur = tape.affine_channels(x, scale, shift);
        for (bi, block) in self.blocks.iter().enumerate() {
            if bi > 0 {
                cur = tape.maxpool2x2(cur);
            }
            for conv in block {
                let w = tape.leaf(conv.weight.mapv(T::from_f32), false);
                let b = tape.leaf(conv.bias.mapv(T::from_f32), false);
                let y = tape.conv2d(cur, w, Some(b), 1, 1, 1);
                cur = tape.relu(y);
            }
        }
        Ok(cur)
    }

    /// Evaluate the features of one batch outside any training graph.
    pub fn extract(&self, image: &crate::model::ImageBatch) -> Result<ArrayD<f32>> {
        image.check_finite("feature extraction input")?;
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(image.data.clone().into_dyn(), false);
        let out = self.features_on(&mut tape, x)?;
        Ok(tape.value(out).to_owned())
    }

    /// Write a weight container for this extractor (used by tests and by
    /// tooling that converts trained weights into the container format).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, &ArrayD<f32>)> = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for (ci, conv) in block.iter().enumerate() {
                let stem = format!("conv{}_{}", bi + 1, ci + 1);
                named.push((format!("{stem}.weight"), &conv.weight));
                named.push((format!("{stem}.bias"), &conv.bias));
            }
        }
        records::write_container_file(
            path,
            WEIGHTS_MAGIC,
            WEIGHTS_VERSION,
            &format!("kind=feature-extractor\ntap={}\n", self.tap.label()),
            named.iter().map(|(n, t)| (n.as_str(), *t)),
        )
    }
}
