//! Dataset evaluation: per-image PSNR/SSIM rows with exact aggregate
//! means, computed from eval-mode forward passes.

use ndarray::{Array3, Array4, Axis};

use crate::data::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::quality::{psnr, ssim};
use crate::model::{forward, ImageBatch, Mode, ModelConfig, ParameterStore};

/// One evaluated image.
#[derive(Clone, Debug)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Evaluation result: per-image rows plus their exact means.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub count: usize,
    pub model_tag: String,
}

impl MetricsReport {
    fn from_rows(rows: Vec<MetricRow>, model_tag: &str) -> Self {
        let count = rows.len();
        let n = count as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        MetricsReport {
            rows,
            mean_psnr,
            mean_ssim,
            count,
            model_tag: model_tag.to_string(),
        }
    }

    /// CSV with fixed columns `id,psnr_db,ssim`, a `mean` row last.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.id, r.psnr_db, r.ssim));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6}\n",
            self.mean_psnr, self.mean_ssim
        ));
        out
    }
}

/// Reflect-pad `(C, H, W)` planes on the bottom/right up to the next
/// multiple of `multiple` (mirroring without repeating the edge row), so
/// arbitrary image sizes can pass through the strided encoder.
pub fn reflect_pad_to_multiple(planes: &Array3<f32>, multiple: usize) -> Array3<f32> {
    let (c, h, w) = planes.dim();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return planes.clone();
    }
    let mirror = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else if n == 1 {
            0
        } else {
            let period = 2 * n - 2;
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        }
    };
    Array3::from_shape_fn((c, ph, pw), |(ch, y, x)| {
        planes[(ch, mirror(y, h), mirror(x, w))]
    })
}

/// Eval-mode forward over one image of arbitrary size: pads to the
/// network's spatial multiple, runs, and crops the outputs back. Returns
/// unclamped `(denoised, skeleton)` planes.
pub fn forward_single(
    cfg: &ModelConfig,
    store: &ParameterStore,
    planes: &Array3<f32>,
) -> Result<(Array3<f32>, Array3<f32>)> {
    let (_, h, w) = planes.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("image has no pixels".into()));
    }
    let padded = reflect_pad_to_multiple(planes, cfg.spatial_multiple());
    let (c, ph, pw) = padded.dim();
    let batch = ImageBatch::new(
        padded
            .into_shape_with_order((1, c, ph, pw))
            .expect("inserting a unit batch axis preserves the element count"),
    );
    let out = forward(cfg, store, &batch, Mode::Eval)?;
    let crop = |b: &Array4<f32>| -> Array3<f32> {
        b.index_axis(Axis(0), 0)
            .slice(ndarray::s![.., ..h, ..w])
            .to_owned()
    };
    Ok((crop(&out.denoised.data), crop(&out.skeleton.data)))
}

fn clamp01(planes: &Array3<f32>) -> Array3<f32> {
    planes.mapv(|v| v.clamp(0.0, 1.0))
}

/// Evaluate the records of `split`: denoise each image in eval mode
/// (or pass the noisy input straight through when `bypass_identity` is
/// set — the raw-image baseline), then compare against the clean image
/// with PSNR over all channels and SSIM over luminance.
pub fn evaluate(
    cfg: &ModelConfig,
    store: &ParameterStore,
    records: &[SampleRecord],
    split: Split,
    model_tag: &str,
    bypass_identity: bool,
) -> Result<MetricsReport> {
    let chosen: Vec<&SampleRecord> = records.iter().filter(|r| r.split == split).collect();
    if chosen.is_empty() {
        return Err(Error::Config(format!(
            "nothing to evaluate: no records in the {} split",
            split.label()
        )));
    }
    let mut rows = Vec::with_capacity(chosen.len());
    for rec in chosen {
        let denoised = if bypass_identity {
            rec.noisy.clone()
        } else {
            clamp01(&forward_single(cfg, store, &rec.noisy)?.0)
        };
        rows.push(MetricRow {
            id: rec.id.clone(),
            psnr_db: psnr(&denoised, &rec.clean, 1.0)?,
            ssim: ssim(&denoised, &rec.clean)?,
        });
    }
    Ok(MetricsReport::from_rows(rows, model_tag))
}
