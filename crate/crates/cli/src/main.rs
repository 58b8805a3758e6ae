//! `obiformer`: one binary driving the whole workflow — noise synthesis,
//! skeleton extraction, training, inference, evaluation, efficiency
//! reporting, weight sweeps, plotting, and gradient verification.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures
//! (all runtime failures go to standard error and name the offending
//! path or record).

mod commands;
mod config;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "obiformer",
    version,
    about = "Attentive denoising and skeleton extraction for degraded glyph rubbings"
)]
struct Cli {
    /// Compute device (only the CPU backend exists).
    #[arg(long, global = true, default_value = "cpu", value_parser = ["cpu"])]
    device: String,

    #[command(subcommand)]
    command: Command,
}

/// Hyper-parameter overrides shared by the training-flavoured commands.
/// Precedence: flags beat the config file, which beats built-in defaults.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// key=value config file using `model.<key>` and `train.<key>` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed (initialisation, shuffling, synthetic data).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Weight of the reconstruction-fidelity term.
    #[arg(long)]
    alpha1: Option<f64>,
    /// Weight of the reconstruction feature-space term.
    #[arg(long)]
    alpha2: Option<f64>,
    /// Weight of the skeleton-fidelity term.
    #[arg(long)]
    alpha3: Option<f64>,
    /// Weight of the skeleton feature-space term.
    #[arg(long)]
    alpha4: Option<f64>,
}

/// Synthetic-dataset knobs for commands that can run without real data.
#[derive(Args, Clone)]
struct SyntheticData {
    /// Square size of generated samples.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of generated samples.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Degradation family for generated samples.
    #[arg(long, value_name = "KIND", default_value = "mixed")]
    noise_kind: String,
    /// Degradation strength in [0,1].
    #[arg(long, default_value_t = 0.5)]
    intensity: f32,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of clean .png images.
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Degradation family.
    #[arg(long, value_name = "KIND", default_value = "mixed")]
    noise_kind: String,
    /// Degradation strength in [0,1].
    #[arg(long, default_value_t = 0.5)]
    intensity: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resize inputs to this square size first.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct SkeletonizeArgs {
    /// Directory of .png images.
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Dataset manifest file; omitted, a synthetic dataset is generated.
    #[arg(long = "in", value_name = "MANIFEST")]
    input: Option<PathBuf>,
    /// Output directory for checkpoints, logs, and plots.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    synthetic: SyntheticData,
}

#[derive(Args)]
struct DenoiseArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Directory of degraded .png images.
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Dataset manifest file.
    #[arg(long = "in", value_name = "MANIFEST")]
    input: PathBuf,
    /// Output directory for the metrics CSV.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Score the degraded inputs themselves (no model) as a baseline.
    #[arg(long, default_value_t = false)]
    baseline: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// key=value config file using `model.<key>` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Take the architecture and weights from this checkpoint instead.
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
    /// Output directory for the efficiency CSV.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Square input size.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Measured iterations.
    #[arg(long, default_value_t = 5)]
    iters: usize,
    /// Unmeasured warm-up iterations.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Dataset manifest file; omitted, a synthetic dataset is generated.
    #[arg(long = "in", value_name = "MANIFEST")]
    input: Option<PathBuf>,
    /// Output directory for the sweep CSV and charts.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Which objective weight to vary: alpha1..alpha4.
    #[arg(long, default_value = "alpha1")]
    axis: String,
    /// Comma-separated weight values, e.g. `0.1,1,10`.
    #[arg(long, value_name = "LIST")]
    values: String,
    #[command(flatten)]
    synthetic: SyntheticData,
}

#[derive(Args)]
struct PlotArgs {
    /// Training log CSV produced by `train`.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output directory for the chart and its data.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// key=value config file using `model.<key>` lines; the default is
    /// the smallest verification architecture.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square probe-image size.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Minimum number of probed parameter scalars.
    #[arg(long, default_value_t = 200)]
    probes: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write degraded copies of clean glyph images.
    Synth(SynthArgs),
    /// Binarize images and thin their strokes to one-pixel skeletons.
    Skeletonize(SkeletonizeArgs),
    /// Train a model, writing checkpoints, logs, and a loss curve.
    Train(TrainArgs),
    /// Run a checkpoint over a directory, writing denoised and skeleton
    /// images.
    Denoise(DenoiseArgs),
    /// Score a checkpoint on a dataset split (PSNR/SSIM CSV).
    Eval(EvalArgs),
    /// Report parameter count, analytic operation count, and latency.
    Bench(BenchArgs),
    /// Train once per objective-weight value and chart the metrics.
    Sweep(SweepArgs),
    /// Render a training-log CSV as a loss-curve chart.
    Plot(PlotArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to standard output and
            // succeed; genuine usage errors go to standard error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Skeletonize(args) => commands::skeletonize(args),
        Command::Train(args) => commands::train(args),
        Command::Denoise(args) => commands::denoise(args),
        Command::Eval(args) => commands::eval(args),
        Command::Bench(args) => commands::bench(args),
        Command::Sweep(args) => commands::sweep(args),
        Command::Plot(args) => commands::plot(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
