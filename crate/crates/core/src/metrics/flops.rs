//! Analytic floating-point operation counts, walking the architecture
//! block by block.
//!
//! Counting convention (documented for every report):
//! - a convolution contributes `2 * Cin_per_group * Cout * K^2 * Hout * Wout`
//!   (one multiply and one add per tap), plus `Cout * Hout * Wout` when it
//!   has a bias;
//! - a batched matrix product `(B,m,k) x (B,k,n)` contributes `2*B*m*k*n`;
//! - elementwise operations (activations, residual adds, gate products)
//!   contribute 1 per output element;
//! - softmax contributes 5 per element and layer/batch normalisation 8 per
//!   element (shift, scale, and the shared-statistic arithmetic).
//!
//! `Mac` mode counts multiply-accumulate terms once instead of twice; the
//! elementwise, softmax, and normalisation terms are unchanged.

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// How multiply-accumulate terms are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopConvention {
    /// One multiply-add = 2 FLOPs (the default).
    MulAdd2,
    /// One multiply-add = 1 MAC.
    Mac,
}

impl FlopConvention {
    pub fn label(self) -> &'static str {
        match self {
            FlopConvention::MulAdd2 => "mul-add=2",
            FlopConvention::Mac => "mac",
        }
    }

    fn mac_cost(self) -> u64 {
        match self {
            FlopConvention::MulAdd2 => 2,
            FlopConvention::Mac => 1,
        }
    }
}

/// Operation counts for one forward pass of a single image, additive over
/// the per-module breakdown.
#[derive(Clone, Debug)]
pub struct FlopsReport {
    pub total: u64,
    pub convention: FlopConvention,
    /// `(module, count)` in forward order; counts sum to `total`.
    pub per_module: Vec<(String, u64)>,
    /// The channel-attention map construction and application terms alone
    /// (the part that is linear in spatial size).
    pub attention_core: u64,
    pub height: usize,
    pub width: usize,
}

struct Counter {
    mac: u64,
    per_module: Vec<(String, u64)>,
    current: u64,
    attention_core: u64,
}

impl Counter {
    fn new(convention: FlopConvention) -> Self {
        Counter {
            mac: convention.mac_cost(),
            per_module: Vec::new(),
            current: 0,
            attention_core: 0,
        }
    }

    fn conv(&mut self, c_in_per_group: usize, c_out: usize, k: usize, out_hw: usize, bias: bool) {
        self.current += self.mac * (c_in_per_group * c_out * k * k * out_hw) as u64;
        if bias {
            self.current += (c_out * out_hw) as u64;
        }
    }

    fn matmul(&mut self, m: usize, k: usize, n: usize) -> u64 {
        let cost = self.mac * (m * k * n) as u64;
        self.current += cost;
        cost
    }

    fn elementwise(&mut self, elements: usize) {
        self.current += elements as u64;
    }

    fn softmax(&mut self, elements: usize) {
        self.current += 5 * elements as u64;
    }

    fn norm(&mut self, elements: usize) {
        self.current += 8 * elements as u64;
    }

    fn finish_module(&mut self, name: &str) {
        self.per_module.push((name.to_string(), self.current));
        self.current = 0;
    }

    fn csab(&mut self, c: usize, hw: usize) {
        let hidden = ModelConfig::ffn_hidden(c);
        self.norm(c * hw); // ln1
        for _ in ["q", "k", "v"] {
            self.conv(c, c, 1, hw, false); // pointwise
            self.conv(1, c, 3, hw, false); // depthwise
        }
        self.attention_core += self.matmul(c, hw, c); // similarity map
        self.elementwise(c * c); // temperature scaling
        self.softmax(c * c);
        self.attention_core += self.matmul(c, c, hw); // map application
        self.conv(c, c, 1, hw, false); // projection
        self.elementwise(c * hw); // residual
        self.norm(c * hw); // ln2
        self.conv(c, 2 * hidden, 1, hw, false); // ffn expand
        self.conv(1, 2 * hidden, 3, hw, false); // ffn depthwise
        self.elementwise(hidden * hw); // gelu
        self.elementwise(hidden * hw); // gate product
        self.conv(hidden, c, 1, hw, false); // ffn project
        self.elementwise(c * hw); // ffn residual
    }

    fn gsnb(&mut self, c: usize, hw: usize) {
        self.conv(c, c, 3, hw, false);
        self.norm(c * hw); // bn1
        self.elementwise(c * hw); // relu
        self.conv(c, c, 3, hw, false);
        self.norm(c * hw); // bn2
        self.elementwise(c * hw); // residual
    }

    fn skff(&mut self, c: usize, hw: usize) {
        let d = ModelConfig::skff_reduced(c);
        self.elementwise(c * hw); // stream sum
        self.elementwise(c * hw); // global average pool
        self.conv(c, d, 1, 1, true); // fuse
        self.conv(d, c, 1, 1, true); // gate_r
        self.conv(d, c, 1, 1, true); // gate_g
        self.elementwise(3 * c); // difference, sigmoid, complement
        self.elementwise(2 * c * hw); // two stream re-weightings
        self.elementwise(c * hw); // fused sum
    }

    fn stage(&mut self, cfg: &ModelConfig, name: &str, c: usize, hw: usize) {
        for _ in 0..cfg.csab_per_block {
            self.csab(c, hw);
        }
        for _ in 0..cfg.gsnb_per_block {
            self.gsnb(c, hw);
        }
        self.skff(c, hw);
        self.finish_module(name);
    }
}

fn check_input(cfg: &ModelConfig, height: usize, width: usize) -> Result<()> {
    cfg.validate()?;
    let m = cfg.spatial_multiple();
    if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
        return Err(Error::Shape(format!(
            "input {height}x{width} is not a positive multiple of {m}"
        )));
    }
    Ok(())
}

/// Analytic operation count of one forward pass over a single
/// `height x width` image.
pub fn count_flops(
    cfg: &ModelConfig,
    height: usize,
    width: usize,
    convention: FlopConvention,
) -> Result<FlopsReport> {
    check_input(cfg, height, width)?;
    let mut ctr = Counter::new(convention);
    let hw0 = height * width;

    ctr.conv(cfg.io_channels, cfg.base_channels, 3, hw0, true);
    ctr.elementwise(cfg.base_channels * hw0); // leaky relu
    ctr.finish_module("input_proj");

    for i in 0..cfg.encoder_depth {
        let c = cfg.channels_at(i);
        let hw = hw0 >> (2 * i);
        ctr.stage(cfg, &format!("enc{i}"), c, hw);
        ctr.conv(c, 2 * c, 4, hw >> 2, false);
        ctr.finish_module(&format!("down{i}"));
    }

    let n = cfg.encoder_depth;
    ctr.stage(cfg, "mid", cfg.channels_at(n), hw0 >> (2 * n));

    for i in (0..cfg.encoder_depth).rev() {
        let c = cfg.channels_at(i);
        let hw = hw0 >> (2 * i);
        // Stride-2 2x2 transposed convolution: every input position
        // contributes K^2 taps, so the cost equals Cin*Cout*K^2 over the
        // smaller (input) grid.
        ctr.conv(2 * c, c, 2, hw >> 2, false);
        ctr.elementwise(c * hw); // skip addition
        ctr.finish_module(&format!("up{i}"));
        ctr.stage(cfg, &format!("dec{i}"), c, hw);
    }

    ctr.elementwise(cfg.base_channels * hw0); // shallow + final recon
    ctr.conv(cfg.base_channels, cfg.io_channels, 3, hw0, true);
    ctr.conv(cfg.base_channels, cfg.skeleton_channels, 3, hw0, true);
    ctr.finish_module("heads");

    let total = ctr.per_module.iter().map(|(_, v)| v).sum();
    Ok(FlopsReport {
        total,
        convention,
        per_module: ctr.per_module,
        attention_core: ctr.attention_core,
        height,
        width,
    })
}

/// Cost of the same attention blocks if their similarity map were formed
/// over spatial positions (`HW x HW`) instead of channels — the analytic
/// baseline the linear-in-HW design is compared against. Only the map
/// construction, softmax, and application terms are counted.
pub fn dense_attention_flops(
    cfg: &ModelConfig,
    height: usize,
    width: usize,
    convention: FlopConvention,
) -> Result<u64> {
    check_input(cfg, height, width)?;
    let mac = convention.mac_cost();
    let hw0 = height * width;
    let mut total = 0u64;
    let mut add_stage = |c: usize, hw: usize| {
        let map = mac * (hw * c * hw) as u64;
        let softmax = 5 * (hw * hw) as u64;
        let apply = mac * (hw * hw * c) as u64;
        total += (map + softmax + apply) * cfg.csab_per_block as u64;
    };
    for i in 0..cfg.encoder_depth {
        add_stage(cfg.channels_at(i), hw0 >> (2 * i));
    }
    add_stage(
        cfg.channels_at(cfg.encoder_depth),
        hw0 >> (2 * cfg.encoder_depth),
    );
    for i in (0..cfg.encoder_depth).rev() {
        add_stage(cfg.channels_at(i), hw0 >> (2 * i));
    }
    Ok(total)
}

/// Least-squares slope of `ln(y)` against `ln(x)`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Config(
            "slope fit needs at least two points".into(),
        ));
    }
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(Error::Input(
            "slope fit needs strictly positive coordinates".into(),
        ));
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return Err(Error::Input("slope fit points are degenerate".into()));
    }
    Ok((n * sxy - sx * sy) / denom)
}
