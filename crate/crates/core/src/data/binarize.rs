//! Global Otsu thresholding with minority-class foreground selection.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// BT.601 luminance of `(1 or 3, H, W)` planes.
pub fn luminance(planes: &Array3<f32>) -> Result<Array2<f32>> {
    let (c, h, w) = planes.dim();
    match c {
        1 => Ok(planes.index_axis(ndarray::Axis(0), 0).to_owned()),
        3 => {
            let mut out = Array2::<f32>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    out[(y, x)] = 0.299 * planes[(0, y, x)]
                        + 0.587 * planes[(1, y, x)]
                        + 0.114 * planes[(2, y, x)];
                }
            }
            Ok(out)
        }
        other => Err(Error::Shape(format!(
            "binarization expects 1 or 3 planes, got {other}"
        ))),
    }
}

fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(255)
}

/// Exhaustive Otsu split over a 256-bin histogram: the cut index `t`
/// maximizing between-class variance, classes being bins `0..=t` and
/// `t+1..=255`. Returns `None` when no split separates two non-empty
/// classes (constant image).
pub fn otsu_cut(hist: &[u64; 256]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return None;
    }
    let total_f = total as f64;
    let grand_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as f64 * n as f64)
        .sum();

    let mut best: Option<(usize, f64)> = None;
    let mut count_lo = 0f64;
    let mut sum_lo = 0f64;
    for t in 0..255 {
        count_lo += hist[t] as f64;
        sum_lo += t as f64 * hist[t] as f64;
        let count_hi = total_f - count_lo;
        if count_lo == 0.0 || count_hi == 0.0 {
            continue;
        }
        let mean_lo = sum_lo / count_lo;
        let mean_hi = (grand_sum - sum_lo) / count_hi;
        let between = count_lo / total_f * count_hi / total_f
            * (mean_lo - mean_hi)
            * (mean_lo - mean_hi);
        if best.map_or(true, |(_, b)| between > b) {
            best = Some((t, between));
        }
    }
    best.map(|(t, _)| t)
}

/// Threshold an image into a boolean foreground mask.
///
/// Luminance is histogrammed into 256 bins and split by [`otsu_cut`];
/// whichever side of the cut holds at most half the pixels becomes the
/// foreground (ink may be dark on light rubbings or light on dark
/// ones). A constant image yields an all-background mask.
pub fn binarize(planes: &Array3<f32>) -> Result<Array2<bool>> {
    let luma = luminance(planes)?;
    let mut hist = [0u64; 256];
    for &v in luma.iter() {
        if !v.is_finite() {
            return Err(Error::Input(
                "binarization input contains a non-finite value".into(),
            ));
        }
        hist[bin_of(v)] += 1;
    }
    let (h, w) = luma.dim();
    let total = (h * w) as u64;
    let Some(cut) = otsu_cut(&hist) else {
        return Ok(Array2::from_elem((h, w), false));
    };
    let dark_count: u64 = hist[..=cut].iter().sum();
    // Minority class is foreground; on an exact tie prefer the dark side.
    let dark_is_foreground = dark_count <= total - dark_count;
    let mut mask = Array2::<bool>::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let dark = bin_of(luma[(y, x)]) <= cut;
            mask[(y, x)] = dark == dark_is_foreground;
        }
    }
    Ok(mask)
}
