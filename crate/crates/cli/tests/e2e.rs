//! End-to-end tests that drive the `obiformer` binary as a subprocess
//! on tiny fixtures: every subcommand, the exit-code contract (0 ok,
//! 1 usage, 2 runtime failure), and the files each command promises.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use obiformer_core::data::{generate_glyph, synthesize_noise, write_png, NoiseKind, NoiseSpec};
use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_obiformer")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("the binary should spawn")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code_of(out: &Output) -> i32 {
    out.status.code().expect("the process should exit normally")
}

fn assert_ok(out: &Output) {
    assert_eq!(
        code_of(out),
        0,
        "expected success, got stderr: {}",
        stderr_of(out)
    );
}

fn path_str(p: &Path) -> String {
    p.to_str().expect("temp paths should be valid UTF-8").to_string()
}

/// Write `count` glyph images named `g0.png`, `g1.png`, … into `dir`.
fn write_glyphs(dir: &Path, count: usize, height: usize, width: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let img = generate_glyph(height, width, 40 + i as u64);
        write_png(&dir.join(format!("g{i}.png")), &img).unwrap();
    }
}

/// Smallest architecture plus a fast learning rate, as a config file.
fn write_tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.cfg");
    let text = format!(
        "# smallest architecture that still exercises every code path\n\
         model.encoder_depth = 1\n\
         model.base_channels = 4\n\
         train.learning_rate = 0.002\n\
         {extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

/// Build a `triplet_dirs` dataset (noisy/ + clean/ with shared ids)
/// under `root` and write a manifest next to it. Returns the manifest
/// path.
fn write_triplet_fixture(root: &Path, ids: usize, size: usize, fractions: (f64, f64, f64)) -> PathBuf {
    let noisy_dir = root.join("data").join("noisy");
    let clean_dir = root.join("data").join("clean");
    std::fs::create_dir_all(&noisy_dir).unwrap();
    std::fs::create_dir_all(&clean_dir).unwrap();
    for i in 0..ids {
        let clean = generate_glyph(size, size, 900 + i as u64);
        let spec = NoiseSpec::new(NoiseKind::Mixed, 0.5, 77 + i as u64);
        let noisy = synthesize_noise(&clean, &spec).unwrap();
        write_png(&clean_dir.join(format!("id{i}.png")), &clean).unwrap();
        write_png(&noisy_dir.join(format!("id{i}.png")), &noisy).unwrap();
    }
    let manifest = root.join("dataset.manifest");
    let (tr, va, te) = fractions;
    std::fs::write(
        &manifest,
        format!(
            "root = data\n\
             layout = triplet_dirs\n\
             train_fraction = {tr}\n\
             val_fraction = {va}\n\
             test_fraction = {te}\n\
             seed = 5\n\
             target_height = {size}\n\
             target_width = {size}\n"
        ),
    )
    .unwrap();
    manifest
}

/// Train a throwaway tiny checkpoint and return its path.
fn train_tiny_checkpoint(dir: &Path) -> PathBuf {
    let cfg = write_tiny_config(dir, "");
    let out_dir = dir.join("train_out");
    let out = run(&[
        "train",
        "--config",
        &path_str(&cfg),
        "--out",
        &path_str(&out_dir),
        "--epochs",
        "1",
        "--batch",
        "2",
        "--alpha2",
        "0",
        "--alpha4",
        "0",
        "--size",
        "16",
        "--count",
        "2",
        "--seed",
        "9",
    ]);
    assert_ok(&out);
    out_dir.join("ckpt_last.obif")
}

#[test]
fn help_prints_usage_on_standard_output() {
    let out = run(&["--help"]);
    assert_eq!(code_of(&out), 0);
    let text = stdout_of(&out);
    assert!(text.contains("Usage"), "help should show usage: {text}");
    for sub in [
        "synth",
        "skeletonize",
        "train",
        "denoise",
        "eval",
        "bench",
        "sweep",
        "plot",
        "gradcheck",
    ] {
        assert!(text.contains(sub), "help should list `{sub}`");
    }
    assert!(stderr_of(&out).is_empty());
}

#[test]
fn subcommand_help_also_exits_zero() {
    for sub in ["train", "denoise", "gradcheck"] {
        let out = run(&[sub, "--help"]);
        assert_eq!(code_of(&out), 0, "`{sub} --help` should succeed");
        assert!(stdout_of(&out).contains("Usage"));
    }
}

#[test]
fn version_flag_exits_zero() {
    let out = run(&["--version"]);
    assert_eq!(code_of(&out), 0);
    assert!(!stdout_of(&out).trim().is_empty());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["explode"]);
    assert_eq!(code_of(&out), 1);
    let err = stderr_of(&out);
    assert!(err.contains("Usage"), "usage should go to stderr: {err}");
    assert!(stdout_of(&out).is_empty());
}

#[test]
fn missing_required_flags_are_usage_errors() {
    let out = run(&["denoise"]);
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).contains("--ckpt"));
}

#[test]
fn an_unsupported_device_is_rejected_up_front() {
    let out = run(&["gradcheck", "--device", "tpu"]);
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).contains("cpu"));
}

#[test]
fn synth_writes_a_noisy_clean_pair_per_input() {
    let tmp = TempDir::new().unwrap();
    let in_dir = tmp.path().join("in");
    write_glyphs(&in_dir, 3, 16, 16);
    std::fs::write(in_dir.join("notes.txt"), "not an image").unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "synth",
        "--in",
        &path_str(&in_dir),
        "--out",
        &path_str(&out_dir),
        "--noise-kind",
        "dense_white",
        "--intensity",
        "0.6",
        "--seed",
        "3",
    ]);
    assert_ok(&out);
    for i in 0..3 {
        for suffix in ["noisy", "clean"] {
            let p = out_dir.join(format!("g{i}_{suffix}.png"));
            assert!(p.is_file(), "missing {}", p.display());
            assert!(std::fs::metadata(&p).unwrap().len() > 0);
        }
    }
    assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), 6);
}

#[test]
fn synth_on_an_empty_directory_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let in_dir = tmp.path().join("empty");
    std::fs::create_dir_all(&in_dir).unwrap();
    let out = run(&[
        "synth",
        "--in",
        &path_str(&in_dir),
        "--out",
        &path_str(&tmp.path().join("out")),
    ]);
    assert_eq!(code_of(&out), 2);
    let err = stderr_of(&out);
    assert!(err.starts_with("error:"), "runtime errors start with `error:`: {err}");
    assert!(err.contains("empty"), "the offending path should be named: {err}");
}

#[test]
fn skeletonize_emits_one_skeleton_per_image() {
    let tmp = TempDir::new().unwrap();
    let in_dir = tmp.path().join("in");
    write_glyphs(&in_dir, 2, 20, 14);
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "skeletonize",
        "--in",
        &path_str(&in_dir),
        "--out",
        &path_str(&out_dir),
    ]);
    assert_ok(&out);
    assert!(out_dir.join("g0_skeleton.png").is_file());
    assert!(out_dir.join("g1_skeleton.png").is_file());
}

#[test]
fn train_writes_checkpoint_logs_and_charts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_tiny_config(tmp.path(), "");
    let out_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--config",
        &path_str(&cfg),
        "--out",
        &path_str(&out_dir),
        "--epochs",
        "2",
        "--batch",
        "2",
        "--alpha2",
        "0",
        "--alpha4",
        "0",
        "--size",
        "16",
        "--count",
        "4",
        "--seed",
        "7",
    ]);
    assert_ok(&out);
    let text = stdout_of(&out);
    assert!(text.contains("trained 2 epoch"), "summary line expected: {text}");
    for name in [
        "ckpt_last.obif",
        "train_log.csv",
        "loss_curve.csv",
        "loss_curve.png",
    ] {
        assert!(out_dir.join(name).is_file(), "missing {name}");
    }
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("step,")), "log header: {log}");
}

#[test]
fn command_line_flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_tiny_config(tmp.path(), "train.epochs = 5\n");
    let out_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--config",
        &path_str(&cfg),
        "--out",
        &path_str(&out_dir),
        "--epochs",
        "1",
        "--batch",
        "2",
        "--alpha2",
        "0",
        "--alpha4",
        "0",
        "--size",
        "16",
        "--count",
        "2",
    ]);
    assert_ok(&out);
    assert!(
        stdout_of(&out).contains("trained 1 epoch"),
        "the flag should win over the file: {}",
        stdout_of(&out)
    );
}

#[test]
fn a_config_file_with_a_foreign_section_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "model.encoder_depth = 1\noptimizer.beta = 0.9\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        &path_str(&cfg),
        "--out",
        &path_str(&tmp.path().join("run")),
    ]);
    assert_eq!(code_of(&out), 2);
    let err = stderr_of(&out);
    assert!(err.contains("model. or train."), "unexpected message: {err}");
    assert!(err.contains("line 2"), "the line should be named: {err}");
}

#[test]
fn train_resumes_from_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let ckpt = train_tiny_checkpoint(tmp.path());
    let out_dir = tmp.path().join("resumed");
    let out = run(&[
        "train",
        "--ckpt",
        &path_str(&ckpt),
        "--out",
        &path_str(&out_dir),
        "--epochs",
        "2",
        "--batch",
        "2",
        "--alpha2",
        "0",
        "--alpha4",
        "0",
        "--size",
        "16",
        "--count",
        "2",
        "--seed",
        "9",
    ]);
    assert_ok(&out);
    assert!(out_dir.join("ckpt_last.obif").is_file());
}

#[test]
fn train_with_a_validation_split_tracks_the_best_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_triplet_fixture(tmp.path(), 8, 16, (0.5, 0.25, 0.25));
    let cfg = write_tiny_config(tmp.path(), "train.validation_every = 1\n");
    let out_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--config",
        &path_str(&cfg),
        "--in",
        &path_str(&manifest),
        "--out",
        &path_str(&out_dir),
        "--epochs",
        "2",
        "--batch",
        "2",
        "--alpha2",
        "0",
        "--alpha4",
        "0",
        "--seed",
        "1",
    ]);
    assert_ok(&out);
    let text = stdout_of(&out);
    assert!(text.contains("val"), "validation lines expected: {text}");
    assert!(out_dir.join("ckpt_best.obif").is_file());
    let val_log = std::fs::read_to_string(out_dir.join("val_log.csv")).unwrap();
    assert!(val_log.starts_with("epoch,psnr_db,ssim"), "val log: {val_log}");
    assert_eq!(val_log.lines().count(), 3, "one row per validated epoch");
}

#[test]
fn denoise_writes_a_denoised_and_a_skeleton_image_per_input() {
    let tmp = TempDir::new().unwrap();
    let ckpt = train_tiny_checkpoint(tmp.path());
    let in_dir = tmp.path().join("degraded");
    std::fs::create_dir_all(&in_dir).unwrap();
    // Five inputs, several with sizes the network must pad internally.
    for (i, (h, w)) in [(16, 16), (13, 9), (20, 18), (9, 13), (32, 24)]
        .into_iter()
        .enumerate()
    {
        let clean = generate_glyph(h, w, 600 + i as u64);
        let spec = NoiseSpec::new(NoiseKind::Mixed, 0.5, i as u64);
        let noisy = synthesize_noise(&clean, &spec).unwrap();
        write_png(&in_dir.join(format!("g{i}.png")), &noisy).unwrap();
    }
    let out_dir = tmp.path().join("restored");
    let out = run(&[
        "denoise",
        "--ckpt",
        &path_str(&ckpt),
        "--in",
        &path_str(&in_dir),
        "--out",
        &path_str(&out_dir),
    ]);
    assert_ok(&out);
    for i in 0..5 {
        assert!(out_dir.join(format!("g{i}_denoised.png")).is_file());
        assert!(out_dir.join(format!("g{i}_skeleton.png")).is_file());
    }
    assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), 10);
}

#[test]
fn a_missing_checkpoint_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let in_dir = tmp.path().join("in");
    write_glyphs(&in_dir, 1, 16, 16);
    let missing = tmp.path().join("missing.obif");
    let out = run(&[
        "denoise",
        "--ckpt",
        &path_str(&missing),
        "--in",
        &path_str(&in_dir),
        "--out",
        &path_str(&tmp.path().join("out")),
    ]);
    assert_eq!(code_of(&out), 2);
    let err = stderr_of(&out);
    assert!(err.starts_with("error:"), "unexpected stderr: {err}");
    assert!(err.contains("missing.obif"), "the path should be named: {err}");
}

#[test]
fn eval_scores_a_manifest_and_writes_a_metrics_csv() {
    let tmp = TempDir::new().unwrap();
    let ckpt = train_tiny_checkpoint(tmp.path());
    let manifest = write_triplet_fixture(tmp.path(), 4, 16, (0.0, 0.0, 1.0));
    let out_dir = tmp.path().join("scores");
    let out = run(&[
        "eval",
        "--ckpt",
        &path_str(&ckpt),
        "--in",
        &path_str(&manifest),
        "--out",
        &path_str(&out_dir),
    ]);
    assert_ok(&out);
    assert!(stdout_of(&out).contains("psnr"), "summary: {}", stdout_of(&out));
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("id,psnr_db,ssim"), "csv: {csv}");
    // Header, one row per image, and a trailing mean row.
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn eval_baseline_scores_the_degraded_inputs_themselves() {
    let tmp = TempDir::new().unwrap();
    let ckpt = train_tiny_checkpoint(tmp.path());
    let manifest = write_triplet_fixture(tmp.path(), 3, 16, (0.0, 0.0, 1.0));
    let out_dir = tmp.path().join("scores");
    let out = run(&[
        "eval",
        "--baseline",
        "--ckpt",
        &path_str(&ckpt),
        "--in",
        &path_str(&manifest),
        "--out",
        &path_str(&out_dir),
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn bench_reports_parameters_flops_and_latency() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_tiny_config(tmp.path(), "");
    let out_dir = tmp.path().join("bench");
    let out = run(&[
        "bench",
        "--config",
        &path_str(&cfg),
        "--out",
        &path_str(&out_dir),
        "--size",
        "16",
        "--iters",
        "3",
        "--warmup",
        "1",
    ]);
    assert_ok(&out);
    let text = stdout_of(&out);
    assert!(text.contains("params"), "summary: {text}");
    let csv = std::fs::read_to_string(out_dir.join("efficiency.csv")).unwrap();
    assert!(csv.starts_with("param_count,flops,convention"), "csv: {csv}");
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn sweep_charts_metrics_across_weight_values() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_tiny_config(tmp.path(), "");
    let out_dir = tmp.path().join("sweep");
    let out = run(&[
        "sweep",
        "--config",
        &path_str(&cfg),
        "--out",
        &path_str(&out_dir),
        "--axis",
        "alpha3",
        "--values",
        "0.5,2",
        "--epochs",
        "1",
        "--batch",
        "2",
        "--alpha2",
        "0",
        "--alpha4",
        "0",
        "--size",
        "16",
        "--count",
        "4",
        "--seed",
        "3",
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(out_dir.join("sweep_alpha3.csv")).unwrap();
    assert!(csv.starts_with("alpha3,psnr_db,ssim"), "csv: {csv}");
    assert_eq!(csv.lines().count(), 3, "one row per swept value");
    assert!(out_dir.join("sweep_alpha3_psnr.png").is_file());
    assert!(out_dir.join("sweep_alpha3_ssim.png").is_file());
}

#[test]
fn sweep_rejects_an_unknown_axis() {
    let out = run(&[
        "sweep",
        "--out",
        "/tmp/unused",
        "--axis",
        "alpha9",
        "--values",
        "1",
    ]);
    assert_eq!(code_of(&out), 2);
    assert!(stderr_of(&out).contains("alpha9"));
}

#[test]
fn plot_recreates_the_loss_chart_from_a_log() {
    let tmp = TempDir::new().unwrap();
    let log = tmp.path().join("train_log.csv");
    std::fs::write(
        &log,
        "# run notes\n\
         step,epoch,loss,lr,wall_ms\n\
         1,1,5.0,0.001,12.5\n\
         2,1,4.0,0.001,12.1\n\
         3,2,3.5,0.001,11.9\n\
         4,2,3.25,0.001,12.0\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("charts");
    let out = run(&[
        "plot",
        "--in",
        &path_str(&log),
        "--out",
        &path_str(&out_dir),
    ]);
    assert_ok(&out);
    assert!(stdout_of(&out).contains("4 steps"), "summary: {}", stdout_of(&out));
    assert!(out_dir.join("loss_curve.csv").is_file());
    assert!(out_dir.join("loss_curve.png").is_file());
}

#[test]
fn plot_rejects_a_malformed_log_line() {
    let tmp = TempDir::new().unwrap();
    let log = tmp.path().join("train_log.csv");
    std::fs::write(&log, "step,epoch,loss,lr,wall_ms\n7,banana\n").unwrap();
    let out = run(&[
        "plot",
        "--in",
        &path_str(&log),
        "--out",
        &path_str(&tmp.path().join("charts")),
    ]);
    assert_eq!(code_of(&out), 2);
    let err = stderr_of(&out);
    assert!(err.contains("line"), "the line should be named: {err}");
}

#[test]
fn gradcheck_passes_on_the_tiny_architecture() {
    let out = run(&["gradcheck", "--size", "16", "--probes", "48", "--seed", "0"]);
    assert_ok(&out);
    let text = stdout_of(&out);
    assert!(text.contains("PASS"), "report: {text}");
    assert!(text.contains("relative error"), "report: {text}");
}
