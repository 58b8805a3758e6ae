//! The nine subcommand executors. Every command writes only under its
//! `--out` directory and reports failures with the offending path or
//! record id.

use std::path::{Path, PathBuf};

use obiformer_core::data::{
    binarize, load_dataset, mask_to_planes, read_rgb, resize_bilinear, skeletonize as thin,
    synthesize_noise, synthetic_dataset, write_png, DatasetManifest, NoiseKind, NoiseSpec,
    Split,
};
use obiformer_core::metrics::{
    alpha_sweep, benchmark_inference, emit_loss_plot, emit_metrics_csv, emit_sweep_plot,
    forward_single, AlphaAxis,
};
use obiformer_core::model::build_model;
use obiformer_core::train::{write_train_log, write_val_log, StepRecord, Trainer};
use obiformer_core::{
    count_flops, count_parameters, evaluate, gradient_check, Error, FeatureExtractor,
    FlopConvention, GradCheckOptions, ModelConfig, Result, TrainConfig,
};

use crate::{
    BenchArgs, DenoiseArgs, EvalArgs, GradcheckArgs, PlotArgs, SkeletonizeArgs, SweepArgs,
    SynthArgs, SyntheticData, TrainArgs,
};

/// Sorted `.png` paths directly inside `dir`.
fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(Error::Config(format!(
            "{}: no .png files to process",
            dir.display()
        )));
    }
    files.sort();
    Ok(files)
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stem_of(path: &Path) -> Result<&str> {
    path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| {
        Error::Config(format!("{}: file name is not valid UTF-8", path.display()))
    })
}

/// Build the records a training-flavoured command consumes: a manifest
/// when given, otherwise a seeded synthetic dataset.
fn training_records(
    input: Option<&Path>,
    synthetic: &SyntheticData,
    seed: u64,
) -> Result<Vec<obiformer_core::SampleRecord>> {
    match input {
        Some(path) => {
            let manifest = DatasetManifest::from_file(path)?;
            load_dataset(&manifest)
        }
        None => synthetic_dataset(
            synthetic.count,
            synthetic.size,
            synthetic.size,
            NoiseKind::parse(&synthetic.noise_kind)?,
            synthetic.intensity,
            seed,
        ),
    }
}

/// The feature extractor, loaded from the weight cache only when some
/// objective term needs it.
fn extractor_if_needed(train: &TrainConfig) -> Result<Option<FeatureExtractor>> {
    if train.weights.needs_features() {
        Ok(Some(FeatureExtractor::from_cache(Default::default())?))
    } else {
        Ok(None)
    }
}

/// The split evaluation reports on: held-out first, training split as
/// the last resort.
fn reporting_split(records: &[obiformer_core::SampleRecord]) -> Result<Split> {
    for split in [Split::Test, Split::Val, Split::Train] {
        if records.iter().any(|r| r.split == split) {
            return Ok(split);
        }
    }
    Err(Error::Config("dataset has no records".into()))
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let kind = NoiseKind::parse(&args.noise_kind)?;
    let files = png_files(&args.input)?;
    ensure_out(&args.out)?;
    for (i, path) in files.iter().enumerate() {
        let stem = stem_of(path)?;
        let mut clean = read_rgb(path)?;
        if let Some(size) = args.size {
            clean = resize_bilinear(&clean, size, size)?;
        }
        let spec = NoiseSpec::new(kind, args.intensity, args.seed.wrapping_add(i as u64));
        let noisy = synthesize_noise(&clean, &spec)?;
        write_png(&args.out.join(format!("{stem}_noisy.png")), &noisy)?;
        write_png(&args.out.join(format!("{stem}_clean.png")), &clean)?;
    }
    println!(
        "synthesized {} degraded/clean pairs into {}",
        files.len(),
        args.out.display()
    );
    Ok(())
}

pub fn skeletonize(args: SkeletonizeArgs) -> Result<()> {
    let files = png_files(&args.input)?;
    ensure_out(&args.out)?;
    for path in &files {
        let stem = stem_of(path)?;
        let planes = read_rgb(path)?;
        let mask = binarize(&planes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let skeleton = thin(&mask);
        write_png(
            &args.out.join(format!("{stem}_skeleton.png")),
            &mask_to_planes(&skeleton),
        )?;
    }
    println!(
        "skeletonized {} images into {}",
        files.len(),
        args.out.display()
    );
    Ok(())
}

/// Progress-aware config text embedded at the top of training logs.
fn log_header(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut text = String::new();
    for line in model.to_kv().lines() {
        text.push_str(&format!("model.{line}\n"));
    }
    for line in train.to_kv().lines() {
        text.push_str(&format!("train.{line}\n"));
    }
    text
}

pub fn train(args: TrainArgs) -> Result<()> {
    let (model_cfg, train_cfg) = args.overrides.resolve()?;
    ensure_out(&args.out)?;
    let mut trainer = match &args.ckpt {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            // Flags and config files retune a resumed run; the
            // architecture stays whatever the checkpoint holds.
            t.train_config = train_cfg.clone();
            t.train_config.validate()?;
            t
        }
        None => Trainer::new(model_cfg.clone(), train_cfg.clone())?,
    };
    let records = training_records(
        args.input.as_deref(),
        &args.synthetic,
        trainer.train_config.seed,
    )?;
    let fx = extractor_if_needed(&trainer.train_config)?;

    let last_path = args.out.join("ckpt_last.obif");
    let best_path = args.out.join("ckpt_best.obif");
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut best_psnr = f64::NEG_INFINITY;
    while trainer.epochs_done < trainer.train_config.epochs {
        steps.extend(trainer.run_epoch(&records, fx.as_ref())?);
        let done = trainer.epochs_done;
        let every = trainer.train_config.validation_every;
        if every > 0 && done % every == 0 {
            if let Some(v) = trainer.validate_now(&records)? {
                println!(
                    "epoch {done}: val psnr {:.3} dB, ssim {:.4}",
                    v.psnr_db, v.ssim
                );
                if v.psnr_db > best_psnr {
                    best_psnr = v.psnr_db;
                    trainer.save(&best_path)?;
                }
            }
        }
        let ckpt_every = trainer.train_config.checkpoint_every;
        if ckpt_every > 0 && done % ckpt_every == 0 {
            trainer.save(&last_path)?;
        }
    }
    trainer.save(&last_path)?;

    let header = log_header(&trainer.model_config, &trainer.train_config);
    write_train_log(&args.out.join("train_log.csv"), &header, &steps)?;
    if !trainer.val_records.is_empty() {
        write_val_log(&args.out.join("val_log.csv"), &trainer.val_records)?;
    }
    if !steps.is_empty() {
        emit_loss_plot(&args.out, &steps)?;
    }
    let final_loss = steps.last().map(|s| s.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs ({} steps, final loss {final_loss:.6}); checkpoints in {}",
        trainer.epochs_done,
        trainer.global_step,
        args.out.display()
    );
    if let Some(best) = trainer.best_validation() {
        println!(
            "best validation: epoch {} with psnr {:.3} dB, ssim {:.4}",
            best.epoch, best.psnr_db, best.ssim
        );
    }
    Ok(())
}

pub fn denoise(args: DenoiseArgs) -> Result<()> {
    let trainer = Trainer::load(&args.ckpt)?;
    let files = png_files(&args.input)?;
    ensure_out(&args.out)?;
    for path in &files {
        let stem = stem_of(path)?;
        let noisy = read_rgb(path)?;
        let (denoised, skeleton) = forward_single(&trainer.model_config, &trainer.store, &noisy)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        write_png(
            &args.out.join(format!("{stem}_denoised.png")),
            &denoised.mapv(|v| v.clamp(0.0, 1.0)),
        )?;
        write_png(
            &args.out.join(format!("{stem}_skeleton.png")),
            &skeleton.mapv(|v| v.clamp(0.0, 1.0)),
        )?;
    }
    println!(
        "denoised {} images into {}",
        files.len(),
        args.out.display()
    );
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let trainer = Trainer::load(&args.ckpt)?;
    let manifest = DatasetManifest::from_file(&args.input)?;
    let records = load_dataset(&manifest)?;
    let split = reporting_split(&records)?;
    ensure_out(&args.out)?;
    let tag = if args.baseline { "baseline" } else { "model" };
    let report = evaluate(
        &trainer.model_config,
        &trainer.store,
        &records,
        split,
        tag,
        args.baseline,
    )?;
    let path = emit_metrics_csv(&args.out, "metrics", &report)?;
    println!(
        "{tag} on the {} split ({} images): psnr {:.3} dB, ssim {:.4} -> {}",
        split.label(),
        report.count,
        report.mean_psnr,
        report.mean_ssim,
        path.display()
    );
    Ok(())
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let (model_cfg, store) = match &args.ckpt {
        Some(path) => {
            let t = Trainer::load(path)?;
            (t.model_config, t.store)
        }
        None => {
            let (model_cfg, _) = crate::config::load_file(args.config.as_deref())?;
            let store = build_model(&model_cfg, args.seed)?;
            (model_cfg, store)
        }
    };
    ensure_out(&args.out)?;
    let flops = count_flops(&model_cfg, args.size, args.size, FlopConvention::MulAdd2)?;
    let mut report = benchmark_inference(
        &model_cfg,
        &store,
        (1, model_cfg.io_channels, args.size, args.size),
        args.warmup,
        args.iters,
    )?;
    report.flops = flops.total;
    let path = args.out.join("efficiency.csv");
    std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    println!(
        "params {}  flops {} ({})  latency mean {:.2} ms, p50 {:.2} ms, p95 {:.2} ms at {}x{} -> {}",
        count_parameters(&store),
        report.flops,
        report.convention.label(),
        report.mean_ms,
        report.p50_ms,
        report.p95_ms,
        args.size,
        args.size,
        path.display()
    );
    Ok(())
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let (model_cfg, train_cfg) = args.overrides.resolve()?;
    let axis = AlphaAxis::parse(&args.axis)?;
    let mut values = Vec::new();
    for piece in args.values.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        values.push(piece.parse::<f64>().map_err(|_| {
            Error::Config(format!("--values entry {piece:?} is not a number"))
        })?);
    }
    let records = training_records(args.input.as_deref(), &args.synthetic, train_cfg.seed)?;
    let swept_term_active = matches!(axis, AlphaAxis::A2 | AlphaAxis::A4)
        && values.iter().any(|&v| v != 0.0);
    let fx = if train_cfg.weights.needs_features() || swept_term_active {
        Some(FeatureExtractor::from_cache(Default::default())?)
    } else {
        None
    };
    ensure_out(&args.out)?;
    let rows = alpha_sweep(&model_cfg, &train_cfg, axis, &values, &records, fx.as_ref())?;
    let stem = format!("sweep_{}", axis.label());
    let paths = emit_sweep_plot(&args.out, &stem, axis.label(), &rows)?;
    for row in &rows {
        println!(
            "{} = {}: psnr {:.3} dB, ssim {:.4}",
            axis.label(),
            row.value,
            row.psnr_db,
            row.ssim
        );
    }
    println!("wrote {} sweep files to {}", paths.len(), args.out.display());
    Ok(())
}

/// Parse a training-log CSV (as written by `train`) back into records.
fn parse_train_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut steps = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("step,") {
            continue;
        }
        let bad = || {
            Error::format(
                path,
                format!("line {}: expected step,epoch,loss,lr,wall_ms", lineno + 1),
            )
        };
        let fields: Vec<&str> = line.split(',').collect();
        let [step, epoch, loss, lr, wall_ms] = fields.as_slice() else {
            return Err(bad());
        };
        steps.push(StepRecord {
            step: step.parse().map_err(|_| bad())?,
            epoch: epoch.parse().map_err(|_| bad())?,
            loss: loss.parse().map_err(|_| bad())?,
            lr: lr.parse().map_err(|_| bad())?,
            wall_ms: wall_ms.parse().map_err(|_| bad())?,
        });
    }
    if steps.is_empty() {
        return Err(Error::format(path, "no step rows found"));
    }
    Ok(steps)
}

pub fn plot(args: PlotArgs) -> Result<()> {
    let steps = parse_train_log(&args.input)?;
    ensure_out(&args.out)?;
    let paths = emit_loss_plot(&args.out, &steps)?;
    println!(
        "plotted {} steps -> {}",
        steps.len(),
        paths
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let model_cfg = match &args.config {
        Some(_) => crate::config::load_file(args.config.as_deref())?.0,
        None => ModelConfig::tiny(),
    };
    let opts = GradCheckOptions {
        height: args.size,
        width: args.size,
        min_scalars: args.probes,
        seed: args.seed,
        ..GradCheckOptions::default()
    };
    let report = gradient_check(&model_cfg, &opts)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err, report.tolerance
        )))
    }
}
