//! Deterministic CSV and PNG chart emission for training logs, sweep
//! tables, and block-count ablations. Charts are self-contained rasters:
//! axes, grid, tick labels, and legends are drawn with an embedded 5x7
//! pixel font, so byte-identical inputs produce byte-identical files.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::evaluate::MetricsReport;
use crate::metrics::sweep::SweepRow;
use crate::train::StepRecord;

/// One named polyline.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const FG: Rgb<u8> = Rgb([20, 20, 20]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 4] = [
    Rgb([204, 51, 51]),
    Rgb([41, 101, 178]),
    Rgb([44, 140, 44]),
    Rgb([221, 129, 21]),
];

/// 5x7 glyph rows, top to bottom; bit 4 is the leftmost column.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        ' ' => [0; 7],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x02, 0x04, 0x04, 0x04, 0x08, 0x10],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, color: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..5u8 {
                if row & (0x10 >> rx) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            let px = cx + (rx as u32 * scale + sx) as i64;
                            let py = y + (ry as u32 * scale + sy) as i64;
                            if px >= 0
                                && py >= 0
                                && (px as u32) < img.width()
                                && (py as u32) < img.height()
                            {
                                img.put_pixel(px as u32, py as u32, color);
                            }
                        }
                    }
                }
            }
        }
        cx += (6 * scale) as i64;
    }
}

fn text_width(text: &str, scale: u32) -> i64 {
    (text.chars().count() as u32 * 6 * scale) as i64
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_dot(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    for oy in -1..=1 {
        for ox in -1..=1 {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Tick positions at a "nice" step (1/2/5 times a power of ten).
fn ticks(lo: f64, hi: f64) -> (Vec<f64>, f64) {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / 4.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| span / s <= 5.5)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() * step;
    let mut out = Vec::new();
    let mut v = first;
    while v <= hi + step * 1e-9 {
        out.push(if v.abs() < step * 1e-9 { 0.0 } else { v });
        v += step;
    }
    (out, step)
}

fn format_tick(v: f64, step: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1e5 || a < 1e-3 {
        return format!("{v:.1e}").to_uppercase();
    }
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor() as usize).min(6)
    };
    format!("{v:.decimals$}")
}

/// Render named polylines into a self-contained chart raster.
pub fn render_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<RgbImage> {
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.is_empty() {
        return Err(Error::Config("chart has no finite points".into()));
    }
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &finite {
        x_lo = x_lo.min(*x);
        x_hi = x_hi.max(*x);
        y_lo = y_lo.min(*y);
        y_hi = y_hi.max(*y);
    }
    if x_hi - x_lo < 1e-12 {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    let pad = ((y_hi - y_lo) * 0.05).max(f64::max(1e-12, y_hi.abs() * 1e-9));
    y_lo -= pad;
    y_hi += pad;

    let (width, height) = (880u32, 540u32);
    let (ml, mr, mt, mb) = (96i64, 28i64, 56i64, 72i64);
    let (pw, ph) = (width as i64 - ml - mr, height as i64 - mt - mb);
    let to_px = |x: f64| ml + ((x - x_lo) / (x_hi - x_lo) * pw as f64).round() as i64;
    let to_py = |y: f64| mt + ph - ((y - y_lo) / (y_hi - y_lo) * ph as f64).round() as i64;

    let mut img = RgbImage::from_pixel(width, height, BG);

    let (xt, xstep) = ticks(x_lo, x_hi);
    let (yt, ystep) = ticks(y_lo, y_hi);
    for &v in &xt {
        let px = to_px(v);
        draw_line(&mut img, px, mt, px, mt + ph, GRID);
        let label = format_tick(v, xstep);
        draw_text(&mut img, px - text_width(&label, 1) / 2, mt + ph + 8, &label, 1, FG);
    }
    for &v in &yt {
        let py = to_py(v);
        draw_line(&mut img, ml, py, ml + pw, py, GRID);
        let label = format_tick(v, ystep);
        draw_text(&mut img, ml - 8 - text_width(&label, 1), py - 3, &label, 1, FG);
    }
    draw_line(&mut img, ml, mt, ml, mt + ph, FG);
    draw_line(&mut img, ml, mt + ph, ml + pw, mt + ph, FG);

    draw_text(
        &mut img,
        (width as i64 - text_width(title, 2)) / 2,
        16,
        title,
        2,
        FG,
    );
    draw_text(
        &mut img,
        ml + (pw - text_width(x_label, 1)) / 2,
        mt + ph + 34,
        x_label,
        1,
        FG,
    );
    draw_text(&mut img, 8, mt - 18, y_label, 1, FG);

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (to_px(x), to_py(y)))
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0].0, pair[0].1, pair[1].0, pair[1].1, color);
        }
        for &(px, py) in &pts {
            draw_dot(&mut img, px, py, color);
        }
        // Legend entry, top-right inside the plot area.
        let ly = mt + 10 + 14 * si as i64;
        let lx = ml + pw - 150;
        draw_line(&mut img, lx, ly + 3, lx + 18, ly + 3, color);
        draw_text(&mut img, lx + 24, ly, &s.label, 1, FG);
    }
    Ok(img)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::format(path, format!("cannot encode chart: {e}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Training-loss curve: writes `loss_curve.csv` and `loss_curve.png`
/// under `out_dir` and returns the paths.
pub fn emit_loss_plot(out_dir: &Path, steps: &[StepRecord]) -> Result<Vec<PathBuf>> {
    if steps.is_empty() {
        return Err(Error::Config("no training steps to plot".into()));
    }
    let mut csv = String::from("step,epoch,loss\n");
    for s in steps {
        csv.push_str(&format!("{},{},{:.9}\n", s.step, s.epoch, s.loss));
    }
    let series = [Series {
        label: "LOSS".to_string(),
        points: steps.iter().map(|s| (s.step as f64, s.loss)).collect(),
    }];
    let img = render_line_chart("TRAINING LOSS", "STEP", "LOSS", &series)?;
    let csv_path = out_dir.join("loss_curve.csv");
    let png_path = out_dir.join("loss_curve.png");
    write_text(&csv_path, &csv)?;
    save_png(&img, &png_path)?;
    Ok(vec![csv_path, png_path])
}

/// Metric-versus-weight sweep chart: writes `<stem>.csv`, `<stem>_psnr.png`
/// and `<stem>_ssim.png` under `out_dir`.
pub fn emit_sweep_plot(
    out_dir: &Path,
    stem: &str,
    axis_label: &str,
    rows: &[SweepRow],
) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Config("no sweep rows to plot".into()));
    }
    let mut csv = format!("{axis_label},psnr_db,ssim\n");
    for r in rows {
        csv.push_str(&format!("{},{:.6},{:.6}\n", r.value, r.psnr_db, r.ssim));
    }
    let psnr_series = [Series {
        label: "PSNR DB".to_string(),
        points: rows.iter().map(|r| (r.value, r.psnr_db)).collect(),
    }];
    let ssim_series = [Series {
        label: "SSIM".to_string(),
        points: rows.iter().map(|r| (r.value, r.ssim)).collect(),
    }];
    let upper = axis_label.to_ascii_uppercase();
    let psnr_img = render_line_chart(&format!("PSNR VS {upper}"), &upper, "PSNR DB", &psnr_series)?;
    let ssim_img = render_line_chart(&format!("SSIM VS {upper}"), &upper, "SSIM", &ssim_series)?;

    let csv_path = out_dir.join(format!("{stem}.csv"));
    let psnr_path = out_dir.join(format!("{stem}_psnr.png"));
    let ssim_path = out_dir.join(format!("{stem}_ssim.png"));
    write_text(&csv_path, &csv)?;
    save_png(&psnr_img, &psnr_path)?;
    save_png(&ssim_img, &ssim_path)?;
    Ok(vec![csv_path, psnr_path, ssim_path])
}

/// Metric-versus-block-count ablation chart; same layout as the sweep
/// chart with an integer x axis.
pub fn emit_block_count_plot(
    out_dir: &Path,
    rows: &[(usize, f64, f64)],
) -> Result<Vec<PathBuf>> {
    let sweep: Vec<SweepRow> = rows
        .iter()
        .map(|&(blocks, psnr_db, ssim)| SweepRow {
            value: blocks as f64,
            psnr_db,
            ssim,
        })
        .collect();
    emit_sweep_plot(out_dir, "block_count", "blocks", &sweep)
}

/// Per-image metric table as CSV (`<stem>.csv` under `out_dir`).
pub fn emit_metrics_csv(out_dir: &Path, stem: &str, report: &MetricsReport) -> Result<PathBuf> {
    if report.rows.is_empty() {
        return Err(Error::Config("no metric rows to write".into()));
    }
    let path = out_dir.join(format!("{stem}.csv"));
    write_text(&path, &report.to_csv())?;
    Ok(path)
}
