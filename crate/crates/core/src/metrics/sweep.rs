//! Loss-weight sensitivity sweeps: short seeded training runs per value,
//! evaluated on a held-out split.

use crate::data::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::loss::FeatureExtractor;
use crate::metrics::evaluate::evaluate;
use crate::model::ModelConfig;
use crate::train::{TrainConfig, Trainer};

/// Which composite-objective weight a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaAxis {
    A1,
    A2,
    A3,
    A4,
}

impl AlphaAxis {
    pub fn label(self) -> &'static str {
        match self {
            AlphaAxis::A1 => "alpha1",
            AlphaAxis::A2 => "alpha2",
            AlphaAxis::A3 => "alpha3",
            AlphaAxis::A4 => "alpha4",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "alpha1" | "a1" | "1" => Ok(AlphaAxis::A1),
            "alpha2" | "a2" | "2" => Ok(AlphaAxis::A2),
            "alpha3" | "a3" | "3" => Ok(AlphaAxis::A3),
            "alpha4" | "a4" | "4" => Ok(AlphaAxis::A4),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected alpha1..alpha4)"
            ))),
        }
    }
}

/// One sweep entry: the weight value and the resulting metrics.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// The split a sweep evaluates on: validation when present, else test,
/// else the training split itself (smoke-scale datasets often have only
/// one split).
fn eval_split(records: &[SampleRecord]) -> Result<Split> {
    for split in [Split::Val, Split::Test, Split::Train] {
        if records.iter().any(|r| r.split == split) {
            return Ok(split);
        }
    }
    Err(Error::Config("sweep dataset is empty".into()))
}

/// Train one short run per value with everything else (including the
/// seed) fixed, evaluating each trained model. Rows come back in the
/// given value order.
pub fn alpha_sweep(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    axis: AlphaAxis,
    values: &[f64],
    records: &[SampleRecord],
    fx: Option<&FeatureExtractor>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let split = eval_split(records)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        match axis {
            AlphaAxis::A1 => cfg.weights.a1 = value,
            AlphaAxis::A2 => cfg.weights.a2 = value,
            AlphaAxis::A3 => cfg.weights.a3 = value,
            AlphaAxis::A4 => cfg.weights.a4 = value,
        }
        let mut trainer = Trainer::new(model_cfg.clone(), cfg)?;
        trainer.run(records, fx)?;
        let report = evaluate(
            model_cfg,
            &trainer.store,
            records,
            split,
            &format!("{}={}", axis.label(), value),
            false,
        )?;
        rows.push(SweepRow {
            value,
            psnr_db: report.mean_psnr,
            ssim: report.mean_ssim,
        });
    }
    Ok(rows)
}
