//! Image-quality metrics: peak signal-to-noise ratio and the structural
//! similarity index, both computed in f64.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Peak signal-to-noise ratio in decibels over all channels:
/// `10*log10(range^2 / MSE)`. The mean squared error is floored at 1e-8,
/// which caps the value at 80 dB for unit dynamic range (identical images
/// report the cap instead of infinity).
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>, dynamic_range: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "psnr inputs differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if !(dynamic_range.is_finite() && dynamic_range > 0.0) {
        return Err(Error::Config(format!(
            "dynamic range must be finite and positive, got {dynamic_range}"
        )));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(10.0 * (dynamic_range * dynamic_range / mse.max(1e-8)).log10())
}

/// BT.601 luminance of a `(C, H, W)` image in f64; single-channel images
/// pass through.
fn luma64(planes: &Array3<f32>) -> Result<Array2<f64>> {
    let (c, h, w) = planes.dim();
    match c {
        1 => Ok(Array2::from_shape_fn((h, w), |(y, x)| {
            planes[(0, y, x)] as f64
        })),
        3 => Ok(Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * planes[(0, y, x)] as f64
                + 0.587 * planes[(1, y, x)] as f64
                + 0.114 * planes[(2, y, x)] as f64
        })),
        other => Err(Error::Input(format!(
            "ssim needs 1 or 3 channels, got {other}"
        ))),
    }
}

/// Normalised 1-D Gaussian taps for the SSIM window.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - mid;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable valid-mode Gaussian filtering.
fn gaussian_filter(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = taps.len();
    let wo = w - k + 1;
    let ho = h - k + 1;
    let mut rows = Array2::<f64>::zeros((h, wo));
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * img[(y, x + i)];
            }
            rows[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * rows[(y + i, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Mean structural similarity over luminance with the reference window:
/// 11x11 Gaussian (sigma 1.5), K1 0.01, K2 0.03, unit dynamic range,
/// valid-mode windows only. Result lies in [-1, 1]; identical images give
/// exactly 1.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    const WINDOW: usize = 11;
    const SIGMA: f64 = 1.5;
    const K1: f64 = 0.01;
    const K2: f64 = 0.03;
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "ssim inputs differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (_, h, w) = a.dim();
    if h < WINDOW || w < WINDOW {
        return Err(Error::Config(format!(
            "ssim needs at least {WINDOW}x{WINDOW} pixels, got {h}x{w}"
        )));
    }
    let x = luma64(a)?;
    let y = luma64(b)?;
    let taps = gaussian_taps(WINDOW, SIGMA);

    let mu_x = gaussian_filter(&x, &taps);
    let mu_y = gaussian_filter(&y, &taps);
    let xx = gaussian_filter(&(&x * &x), &taps);
    let yy = gaussian_filter(&(&y * &y), &taps);
    let xy = gaussian_filter(&(&x * &y), &taps);

    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let n = mu_x.len() as f64;
    for ((((&mx, &my), &sxx), &syy), &sxy) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter())
        .zip(yy.iter())
        .zip(xy.iter())
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(total / n)
}
