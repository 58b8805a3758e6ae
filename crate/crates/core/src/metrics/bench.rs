//! Wall-clock inference benchmarking (strictly serial) and the combined
//! efficiency report.

use std::time::Instant;

use ndarray::Array4;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::flops::FlopConvention;
use crate::model::{count_parameters, forward, ImageBatch, Mode, ModelConfig, ParameterStore};

/// Parameter count, operation count, and latency statistics for one
/// configuration at one input shape.
#[derive(Clone, Debug)]
pub struct EfficiencyReport {
    pub param_count: usize,
    pub flops: u64,
    pub convention: FlopConvention,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// `(batch, channels, height, width)` of the benchmarked input.
    pub input_shape: (usize, usize, usize, usize),
    pub warmup: usize,
    pub iters: usize,
    /// Raw per-iteration times, `iters` entries in measurement order.
    pub samples_ms: Vec<f64>,
    pub device: String,
}

impl EfficiencyReport {
    /// CSV with fixed columns
    /// `param_count,flops,convention,mean_ms,p50_ms,p95_ms,batch,channels,height,width,warmup,iters,device`.
    pub fn to_csv(&self) -> String {
        let (b, c, h, w) = self.input_shape;
        format!(
            "param_count,flops,convention,mean_ms,p50_ms,p95_ms,batch,channels,height,width,warmup,iters,device\n{},{},{},{:.4},{:.4},{:.4},{},{},{},{},{},{},{}\n",
            self.param_count,
            self.flops,
            self.convention.label(),
            self.mean_ms,
            self.p50_ms,
            self.p95_ms,
            b,
            c,
            h,
            w,
            self.warmup,
            self.iters,
            self.device
        )
    }
}

/// Nearest-rank percentile of an already sorted sample list.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Time eval-mode forward passes on one fixed random input: `warmup`
/// unmeasured runs, then `iters` measured ones, strictly serial. `flops`
/// in the result is left at zero for the caller to fill from the analytic
/// counter (keeps this function independent of the counting convention).
pub fn benchmark_inference(
    cfg: &ModelConfig,
    store: &ParameterStore,
    input_shape: (usize, usize, usize, usize),
    warmup: usize,
    iters: usize,
) -> Result<EfficiencyReport> {
    if iters == 0 {
        return Err(Error::Config("benchmark needs at least one iteration".into()));
    }
    let (b, c, h, w) = input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE0C);
    let input = ImageBatch::new(Array4::from_shape_fn((b, c, h, w), |_| rng.gen::<f32>()));

    for _ in 0..warmup {
        forward(cfg, store, &input, Mode::Eval)?;
    }
    let mut samples_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        forward(cfg, store, &input, Mode::Eval)?;
        samples_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    Ok(EfficiencyReport {
        param_count: count_parameters(store),
        flops: 0,
        convention: FlopConvention::MulAdd2,
        mean_ms: samples_ms.iter().sum::<f64>() / iters as f64,
        p50_ms: percentile(&sorted, 50.0),
        p95_ms: percentile(&sorted, 95.0),
        input_shape,
        warmup,
        iters,
        samples_ms,
        device: "cpu-single-thread".to_string(),
    })
}
