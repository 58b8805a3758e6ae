//! The composite training objective.
//!
//! Two terms, each applied to both network outputs: a PSNR term (negated,
//! so minimising the loss maximises PSNR) and a perceptual term (mean
//! absolute distance between frozen deep features of prediction and
//! ground truth). The total is a weighted sum over the denoised image and
//! the skeleton map; zero weights skip their sub-graphs entirely, so a
//! PSNR-only configuration never touches the feature extractor.
//!
//! Every function exists in two forms: a tape builder (`*_on`) used by
//! the training engine and gradient checker, and a plain evaluator over
//! `f32` batches for tests and reporting.

mod vgg;

pub use vgg::{FeatureExtractor, FeatureTap, CACHE_ENV, WEIGHTS_FILE, WEIGHTS_MAGIC};

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::ImageBatch;
use crate::tape::{Scalar, Tape, Var};

/// Default dynamic range of image data in `[0,1]`.
pub const DYNAMIC_RANGE: f64 = 1.0;
/// Floor applied to the mean squared error before the logarithm; caps the
/// PSNR term at 80 dB and keeps its gradient finite at perfect
/// reconstruction.
pub const MSE_FLOOR: f64 = 1e-8;

/// Weights of the four loss terms: `a1` PSNR and `a2` perceptual on the
/// denoised image, `a3` PSNR and `a4` perceptual on the skeleton.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

impl Default for LossWeights {
    /// Calibrated defaults: the image terms carry most of the weight.
    fn default() -> Self {
        LossWeights {
            a1: 100.0,
            a2: 100.0,
            a3: 1.0,
            a4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a1", self.a1),
            ("a2", self.a2),
            ("a3", self.a3),
            ("a4", self.a4),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// True when any perceptual term participates (the feature extractor
    /// is needed only then).
    pub fn needs_features(&self) -> bool {
        self.a2 > 0.0 || self.a4 > 0.0
    }
}

fn expect_same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: prediction shape {a:?} does not match ground truth {b:?}"
        )));
    }
    Ok(())
}

fn expect_positive(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::Config(format!(
            "{name} must be finite and positive, got {v}"
        )));
    }
    Ok(())
}

// ----------------------------------------------------------------------
// Tape builders
// ----------------------------------------------------------------------

/// Negated PSNR on the tape: `10*log10(max(MSE, mse_floor)) -
/// 20*log10(dynamic_range)`. Lower is better; −80 dB is the floor-forced
/// minimum at `dynamic_range` 1.
pub fn psnr_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    dynamic_range: f64,
    mse_floor: f64,
) -> Result<Var> {
    expect_positive("dynamic_range", dynamic_range)?;
    expect_positive("mse_floor", mse_floor)?;
    expect_same_shape("psnr loss", tape.value(pred).shape(), tape.value(gt).shape())?;
    let diff = tape.sub(pred, gt);
    let sq = tape.mul(diff, diff);
    let mse = tape.mean_all(sq);
    let floored = tape.clamp_min(mse, mse_floor);
    let log_mse = tape.log10(floored);
    Ok(tape.mul_add_const(log_mse, 10.0, -20.0 * dynamic_range.log10()))
}

/// Perceptual distance on the tape: mean absolute difference between
/// frozen deep features of prediction and ground truth. Single-channel
/// inputs are replicated to three channels first. Gradients flow only
/// into `pred`'s branch (the extractor itself is frozen, and `gt` is
/// normally a constant leaf).
pub fn perceptual_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    fx: &FeatureExtractor,
) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    expect_same_shape("perceptual loss", &shape, tape.value(gt).shape())?;
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "perceptual loss expects (B, C, H, W), got {shape:?}"
        )));
    }
    let (pred, gt) = match shape[1] {
        3 => (pred, gt),
        1 => (tape.repeat_channels(pred, 3), tape.repeat_channels(gt, 3)),
        c => {
            return Err(Error::Shape(format!(
                "perceptual loss needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let f_pred = fx.features_on(tape, pred)?;
    let f_gt = fx.features_on(tape, gt)?;
    let diff = tape.sub(f_pred, f_gt);
    let abs = tape.abs(diff);
    Ok(tape.mean_all(abs))
}

/// The composite objective on the tape. `gt_image` and `gt_skeleton` are
/// bound as constant leaves; the skeleton prediction is clamped to
/// `[0,1]` here (the network head is unbounded). Terms with zero weight
/// are skipped, so `fx` may be `None` when no perceptual term is active.
pub fn total_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    denoised: Var,
    gt_image: &ArrayD<T>,
    skeleton: Var,
    gt_skeleton: &ArrayD<T>,
    weights: &LossWeights,
    fx: Option<&FeatureExtractor>,
) -> Result<Var> {
    weights.validate()?;
    if weights.needs_features() && fx.is_none() {
        return Err(Error::Config(
            "perceptual loss weight is non-zero but no feature extractor was supplied".into(),
        ));
    }
    let gt_img = tape.leaf(gt_image.clone(), false);
    let gt_skel = tape.leaf(gt_skeleton.clone(), false);
    let skeleton = tape.clamp01(skeleton);

    let mut terms: Vec<Var> = Vec::new();
    let mut add_term = |tape: &mut Tape<T>, weight: f64, var: Var| {
        terms.push(tape.mul_add_const(var, weight, 0.0));
    };
    if weights.a1 > 0.0 {
        let t = psnr_loss_on(tape, denoised, gt_img, DYNAMIC_RANGE, MSE_FLOOR)?;
        add_term(tape, weights.a1, t);
    }
    if weights.a2 > 0.0 {
        let t = perceptual_loss_on(tape, denoised, gt_img, fx.unwrap())?;
        add_term(tape, weights.a2, t);
    }
    if weights.a3 > 0.0 {
        let t = psnr_loss_on(tape, skeleton, gt_skel, DYNAMIC_RANGE, MSE_FLOOR)?;
        add_term(tape, weights.a3, t);
    }
    if weights.a4 > 0.0 {
        let t = perceptual_loss_on(tape, skeleton, gt_skel, fx.unwrap())?;
        add_term(tape, weights.a4, t);
    }

    match terms.split_first() {
        None => Ok(tape.constant_scalar(T::zero())),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t);
            }
            Ok(acc)
        }
    }
}

// ----------------------------------------------------------------------
// Plain evaluators
// ----------------------------------------------------------------------

/// Negated PSNR of a prediction against ground truth (see
/// [`psnr_loss_on`]); symmetric in its arguments.
pub fn psnr_loss(
    pred: &ImageBatch,
    gt: &ImageBatch,
    dynamic_range: f64,
    mse_floor: f64,
) -> Result<f64> {
    pred.check_finite("psnr loss prediction")?;
    gt.check_finite("psnr loss ground truth")?;
    expect_positive("dynamic_range", dynamic_range)?;
    expect_positive("mse_floor", mse_floor)?;
    expect_same_shape("psnr loss", pred.data.shape(), gt.data.shape())?;
    let mse = pred
        .data
        .iter()
        .zip(gt.data.iter())
        .map(|(&p, &g)| {
            let d = p as f64 - g as f64;
            d * d
        })
        .sum::<f64>()
        / pred.data.len() as f64;
    Ok(10.0 * mse.max(mse_floor).log10() - 20.0 * dynamic_range.log10())
}

/// Perceptual distance of a prediction against ground truth (see
/// [`perceptual_loss_on`]).
pub fn perceptual_loss(pred: &ImageBatch, gt: &ImageBatch, fx: &FeatureExtractor) -> Result<f64> {
    pred.check_finite("perceptual loss prediction")?;
    gt.check_finite("perceptual loss ground truth")?;
    let mut tape = Tape::<f32>::new();
    let p = tape.leaf(pred.data.clone().into_dyn(), false);
    let g = tape.leaf(gt.data.clone().into_dyn(), false);
    let loss = perceptual_loss_on(&mut tape, p, g, fx)?;
    Ok(tape.scalar(loss) as f64)
}

/// The composite objective evaluated once (see [`total_loss_on`]).
pub fn total_loss(
    denoised: &ImageBatch,
    gt_image: &ImageBatch,
    skeleton: &ImageBatch,
    gt_skeleton: &ImageBatch,
    weights: &LossWeights,
    fx: Option<&FeatureExtractor>,
) -> Result<f64> {
    denoised.check_finite("denoised prediction")?;
    skeleton.check_finite("skeleton prediction")?;
    let mut tape = Tape::<f32>::new();
    let den = tape.leaf(denoised.data.clone().into_dyn(), false);
    let skel = tape.leaf(skeleton.data.clone().into_dyn(), false);
    let loss = total_loss_on(
        &mut tape,
        den,
        &gt_image.data.clone().into_dyn(),
        skel,
        &gt_skeleton.data.clone().into_dyn(),
        weights,
        fx,
    )?;
    Ok(tape.scalar(loss) as f64)
}
