//! Quality metrics, efficiency accounting, benchmarking, sweeps, and
//! plot emission.

mod bench;
mod evaluate;
mod flops;
mod plot;
mod quality;
mod sweep;

pub use bench::{benchmark_inference, EfficiencyReport};
pub use evaluate::{evaluate, forward_single, reflect_pad_to_multiple, MetricRow, MetricsReport};
pub use flops::{count_flops, dense_attention_flops, log_log_slope, FlopConvention, FlopsReport};
pub use plot::{
    emit_block_count_plot, emit_loss_plot, emit_metrics_csv, emit_sweep_plot, render_line_chart,
    Series,
};
pub use quality::{psnr, ssim};
pub use sweep::{alpha_sweep, AlphaAxis, SweepRow};
