//! Finite-difference verification of the analytic gradients, run in f64
//! over the full network-plus-objective graph.

use indexmap::IndexMap;
use ndarray::{Array4, ArrayD};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{total_loss_on, FeatureExtractor, FeatureTap, LossWeights};
use crate::model::{build_model, forward_open, ImageBatch, Mode, ModelConfig, ParameterStore};

/// Verification settings; the defaults match the tiny-model desk check.
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// Lower bound on the number of scalar weights probed, spread evenly
    /// over the parameter groups.
    pub min_scalars: usize,
    /// Central-difference step applied to the f32 weight.
    pub fd_step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            batch: 1,
            height: 32,
            width: 32,
            min_scalars: 200,
            fd_step: 1e-3,
            tolerance: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

/// Worst observed deviation within one parameter group.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub scalars: usize,
    pub max_rel_err: f64,
    /// Parameter and flat element index of the worst deviation.
    pub worst: String,
}

/// Outcome of a full gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub scalars: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "gradient check: {} scalars, max relative error {:.3e} (tolerance {:.1e})",
            self.scalars, self.max_rel_err, self.tolerance
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "  {:<24} {:>4} scalars  max {:.3e}  worst {}",
                g.group, g.scalars, g.max_rel_err, g.worst
            )?;
        }
        write!(
            f,
            "result: {}",
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Stable classification of parameters into architectural groups, used
/// to guarantee FD coverage of every computation path.
pub fn parameter_group(name: &str) -> &'static str {
    if name.starts_with("input_proj") || name.starts_with("output_proj")
        || name.starts_with("corrector")
    {
        "io-heads"
    } else if name.starts_with("down") || name.starts_with("up") {
        "resampling"
    } else if name.contains(".skff.") {
        "fusion-gate"
    } else if name.contains(".gsnb") && name.contains(".conv") {
        "glyph-convs"
    } else if name.contains(".bn") || name.contains(".ln") {
        "norm-affines"
    } else if name.contains(".ffn.") {
        "gated-ffn"
    } else if name.ends_with(".temperature") {
        "attention-temperature"
    } else if name.contains("_pw") || name.contains("_dw") || name.contains(".proj.") {
        "attention-projections"
    } else {
        "other"
    }
}

fn flat_get(arr: &ArrayD<f32>, idx: usize) -> f32 {
    *arr.as_slice().expect("parameters are standard layout").get(idx).expect("index in range")
}

fn flat_set(arr: &mut ArrayD<f32>, idx: usize, value: f32) {
    *arr.as_slice_mut()
        .expect("parameters are standard layout")
        .get_mut(idx)
        .expect("index in range") = value;
}

/// Compare analytic gradients of the composite objective against f64
/// central finite differences, probing at least `min_scalars` weights
/// spread over every parameter group.
pub fn gradient_check(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    opts.weights.validate()?;
    if opts.batch == 0 || opts.height == 0 || opts.width == 0 {
        return Err(Error::Config("gradient check needs a non-empty input".into()));
    }
    let mut store = build_model(cfg, opts.seed)?;
    // Keep the skeleton head's outputs inside the open interval of its
    // output clamp: checking at a kink of a piecewise-smooth function
    // would compare the two one-sided slopes instead of a derivative.
    store.param_mut("corrector.bias")?.fill(0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6AD5);
    let noisy = ImageBatch::new(Array4::from_shape_fn(
        (opts.batch, cfg.io_channels, opts.height, opts.width),
        |_| rng.gen::<f32>(),
    ));
    let clean: ArrayD<f64> = Array4::from_shape_fn(
        (opts.batch, cfg.io_channels, opts.height, opts.width),
        |_| rng.gen::<f64>(),
    )
    .into_dyn();
    let gt_skel: ArrayD<f64> = Array4::from_shape_fn(
        (opts.batch, cfg.skeleton_channels, opts.height, opts.width),
        |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 },
    )
    .into_dyn();
    let fx = if opts.weights.needs_features() {
        Some(FeatureExtractor::seeded_random(FeatureTap::Deep, opts.seed ^ 0xFEA7))
    } else {
        None
    };

    // Analytic gradients from one training-mode backward sweep.
    let mut analytic: IndexMap<String, ArrayD<f64>> = IndexMap::new();
    let base_loss;
    {
        let open = forward_open::<f64>(cfg, &store, &noisy, Mode::Train, true)?;
        let mut graph = open.graph;
        let loss_var = total_loss_on(
            &mut graph.tape,
            open.denoised,
            &clean,
            open.skeleton,
            &gt_skel,
            &opts.weights,
            fx.as_ref(),
        )?;
        let base = graph.tape.scalar(loss_var);
        if !base.is_finite() {
            return Err(Error::Numeric(format!(
                "gradient check objective is not finite: {base}"
            )));
        }
        base_loss = base;
        let mut grads = graph.tape.backward(loss_var);
        for (name, var) in graph.bound_params() {
            let g = grads
                .take(var)
                .unwrap_or_else(|| ArrayD::zeros(graph.tape.value(var).raw_dim()));
            analytic.insert(name.to_string(), g);
        }
    }

    // Deterministic probe selection: spread the scalar budget evenly
    // over groups, inside a group evenly over parameters, inside a
    // parameter by striding.
    let mut by_group: IndexMap<&'static str, Vec<String>> = IndexMap::new();
    for (name, _) in store.iter_params() {
        by_group
            .entry(parameter_group(name))
            .or_default()
            .push(name.to_string());
    }
    if by_group.contains_key("other") {
        return Err(Error::Config(format!(
            "unclassified parameters: {:?}",
            by_group["other"]
        )));
    }
    let group_quota = opts.min_scalars.div_ceil(by_group.len());
    let mut probes: Vec<(&'static str, String, usize)> = Vec::new();
    for (group, names) in &by_group {
        let per_param = group_quota.div_ceil(names.len());
        let mut taken = 0usize;
        'outer: for round in 0.. {
            let mut progressed = false;
            for name in names {
                let n = store.param(name)?.len();
                if round < per_param.min(n) {
                    // Strided coverage of the tensor.
                    let idx = (round * n) / per_param.min(n).max(1);
                    probes.push((group, name.clone(), idx.min(n - 1)));
                    taken += 1;
                    progressed = true;
                    if taken >= group_quota {
                        break 'outer;
                    }
                }
            }
            if !progressed {
                break;
            }
        }
    }

    let eval = |store: &ParameterStore| -> Result<f64> {
        let open = forward_open::<f64>(cfg, store, &noisy, Mode::Train, false)?;
        let mut graph = open.graph;
        let loss_var = total_loss_on(
            &mut graph.tape,
            open.denoised,
            &clean,
            open.skeleton,
            &gt_skel,
            &opts.weights,
            fx.as_ref(),
        )?;
        Ok(graph.tape.scalar(loss_var))
    };

    // Gradient components below the finite-difference measurement noise
    // cannot be compared meaningfully: a central difference of a loss of
    // magnitude L resolves slopes only down to roughly eps * L / h. The
    // relative-error denominator is floored well above that noise level
    // (but far below any gradient that could influence training), so a
    // noise-scale component never produces a spurious failure while a
    // genuinely wrong gradient of consequential size still does.
    let noise_floor = 1e-8 * base_loss.abs().max(1.0);

    let mut group_reports: IndexMap<&'static str, GroupReport> = IndexMap::new();
    for (group, name, idx) in &probes {
        let w0 = flat_get(store.param(name)?, *idx);
        let an = analytic[name.as_str()]
            .as_slice()
            .expect("gradients are standard layout")[*idx];
        // Central differences with step refinement. The network is only
        // piecewise smooth (rectifier and pooling kinks), and a difference
        // interval straddling a kink measures a blend of one-sided slopes
        // rather than the derivative. Shrinking the step moves the
        // interval off the kink, so a mismatch that persists across the
        // cascade is a genuine gradient defect while a kink artifact
        // disappears; the final steps are still far above f64 roundoff.
        let mut rel = f64::INFINITY;
        let mut fd = f64::NAN;
        for k in 0..4 {
            let step = (opts.fd_step / 4f64.powi(k)) as f32;
            let w_plus = w0 + step;
            let w_minus = w0 - step;
            flat_set(store.param_mut(name)?, *idx, w_plus);
            let loss_plus = eval(&store)?;
            flat_set(store.param_mut(name)?, *idx, w_minus);
            let loss_minus = eval(&store)?;
            flat_set(store.param_mut(name)?, *idx, w0);
            // The step actually applied after f32 rounding.
            let h = w_plus as f64 - w_minus as f64;
            let fd_k = (loss_plus - loss_minus) / h;
            let rel_k = (an - fd_k).abs() / an.abs().max(fd_k.abs()).max(noise_floor);
            if rel_k < rel {
                rel = rel_k;
                fd = fd_k;
            }
            if rel <= opts.tolerance * 0.5 {
                break;
            }
        }
        let entry = group_reports
            .entry(group)
            .or_insert_with(|| GroupReport {
                group: group.to_string(),
                scalars: 0,
                max_rel_err: 0.0,
                worst: String::new(),
            });
        entry.scalars += 1;
        if rel >= entry.max_rel_err {
            entry.max_rel_err = rel;
            entry.worst = format!("{name}[{idx}] (an {an:.3e}, fd {fd:.3e})");
        }
    }

    let groups: Vec<GroupReport> = group_reports.into_iter().map(|(_, g)| g).collect();
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let scalars = groups.iter().map(|g| g.scalars).sum();
    Ok(GradCheckReport {
        groups,
        scalars,
        max_rel_err,
        tolerance: opts.tolerance,
    })
}
