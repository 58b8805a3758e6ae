//! Seeded degradation synthesis: additive whitening masks that mimic
//! the damage seen on rubbings of engraved bone and shell.
//!
//! Every generator produces a per-pixel mask `m in [0,1]` and composites
//! `out = clean + m * (1 - clean)`, so noise only pushes pixels toward
//! white and pixels with `m = 0` are returned bit-for-bit unchanged.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::binarize::binarize;

/// Degradation families that can be synthesized onto a clean glyph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// White blobs centred on stroke pixels, breaking the strokes.
    StrokeBroken,
    /// A white random-walk band crossing the image interior.
    BoneCracked,
    /// Irregular white bands hugging the image borders.
    AbnormalEdges,
    /// Thresholded multi-octave value noise composited as fog.
    DenseWhite,
    /// A random non-empty subset of the four families above.
    Mixed,
}

impl NoiseKind {
    /// The four concrete families `Mixed` draws from.
    pub const BASE: [NoiseKind; 4] = [
        NoiseKind::StrokeBroken,
        NoiseKind::BoneCracked,
        NoiseKind::AbnormalEdges,
        NoiseKind::DenseWhite,
    ];

    pub fn label(self) -> &'static str {
        match self {
            NoiseKind::StrokeBroken => "stroke_broken",
            NoiseKind::BoneCracked => "bone_cracked",
            NoiseKind::AbnormalEdges => "abnormal_edges",
            NoiseKind::DenseWhite => "dense_white",
            NoiseKind::Mixed => "mixed",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "stroke_broken" => Ok(NoiseKind::StrokeBroken),
            "bone_cracked" => Ok(NoiseKind::BoneCracked),
            "abnormal_edges" => Ok(NoiseKind::AbnormalEdges),
            "dense_white" => Ok(NoiseKind::DenseWhite),
            "mixed" => Ok(NoiseKind::Mixed),
            other => Err(Error::Config(format!(
                "unknown noise kind {other:?}; expected one of stroke_broken, \
                 bone_cracked, abnormal_edges, dense_white, mixed"
            ))),
        }
    }

    fn index(self) -> u64 {
        match self {
            NoiseKind::StrokeBroken => 0,
            NoiseKind::BoneCracked => 1,
            NoiseKind::AbnormalEdges => 2,
            NoiseKind::DenseWhite => 3,
            NoiseKind::Mixed => 4,
        }
    }
}

/// A fully determined degradation: same spec, same clean input, same
/// output, on every run and machine.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Severity in `[0,1]`; `0.0` returns the clean input unchanged.
    pub intensity: f32,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, intensity: f32, seed: u64) -> Self {
        Self {
            kind,
            intensity,
            seed,
        }
    }
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(h << 6)
        .wrapping_add(h >> 2);
    h
}

fn rng_for(spec: &NoiseSpec) -> ChaCha8Rng {
    let mut h = spec.seed;
    h = mix(h, spec.kind.index());
    h = mix(h, spec.intensity.to_bits() as u64);
    ChaCha8Rng::seed_from_u64(h)
}

/// Stamp a soft disc of radius `r` at `(cy, cx)` into the mask,
/// keeping the pointwise maximum.
fn stamp_disc(mask: &mut Array2<f32>, cy: f32, cx: f32, r: f32) {
    let (h, w) = mask.dim();
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil() as usize).min(h.saturating_sub(1));
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(w.saturating_sub(1));
    if h == 0 || w == 0 {
        return;
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
            let v = (r + 0.5 - d).clamp(0.0, 1.0);
            if v > mask[(y, x)] {
                mask[(y, x)] = v;
            }
        }
    }
}

/// One-step 3x3 dilation of a boolean mask.
fn dilate(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                if ny >= 0
                    && nx >= 0
                    && ny < h as i64
                    && nx < w as i64
                    && mask[(ny as usize, nx as usize)]
                {
                    return true;
                }
            }
        }
        false
    })
}

/// Piecewise-linear 1-D value noise in `[0,1]` with knots every
/// `spacing` samples.
fn value_noise_1d(len: usize, spacing: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let spacing = spacing.max(1);
    let knots = len / spacing + 2;
    let levels: Vec<f32> = (0..knots).map(|_| rng.gen::<f32>()).collect();
    (0..len)
        .map(|i| {
            let t = i as f32 / spacing as f32;
            let k = t.floor() as usize;
            let frac = t - k as f32;
            levels[k] * (1.0 - frac) + levels[k + 1] * frac
        })
        .collect()
}

/// Bilinearly interpolated 2-D value noise in `[0,1]` with the given
/// cell size.
fn value_noise_2d(h: usize, w: usize, cell: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let cell = cell.max(1);
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.gen::<f32>());
    Array2::from_shape_fn((h, w), |(y, x)| {
        let fy = y as f32 / cell as f32;
        let fx = x as f32 / cell as f32;
        let iy = fy.floor() as usize;
        let ix = fx.floor() as usize;
        let ty = fy - iy as f32;
        let tx = fx - ix as f32;
        let top = grid[(iy, ix)] * (1.0 - tx) + grid[(iy, ix + 1)] * tx;
        let bot = grid[(iy + 1, ix)] * (1.0 - tx) + grid[(iy + 1, ix + 1)] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

fn mask_stroke_broken(
    clean: &Array3<f32>,
    intensity: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f32>> {
    let (_, h, w) = clean.dim();
    let mut mask = Array2::<f32>::zeros((h, w));
    let strokes = dilate(&binarize(clean)?);
    let sites: Vec<(usize, usize)> = strokes
        .indexed_iter()
        .filter_map(|((y, x), &on)| on.then_some((y, x)))
        .collect();
    if sites.is_empty() {
        return Ok(mask);
    }
    let blobs = ((intensity * sites.len() as f32 / 40.0).round() as usize).max(1);
    for _ in 0..blobs {
        let (y, x) = sites[rng.gen_range(0..sites.len())];
        let r = 1.0 + rng.gen::<f32>() * 3.0 * intensity;
        stamp_disc(&mut mask, y as f32, x as f32, r);
    }
    Ok(mask)
}

fn mask_bone_cracked(h: usize, w: usize, intensity: f32, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let mut mask = Array2::<f32>::zeros((h, w));
    let cracks = 1 + (intensity * 2.0).floor() as usize;
    for _ in 0..cracks {
        let radius = 0.5 + 2.5 * intensity;
        let vertical = rng.gen_bool(0.5);
        if vertical {
            let mut x = rng.gen_range(w as i64 / 4..(3 * w as i64 / 4).max(w as i64 / 4 + 1));
            for y in 0..h {
                x = (x + rng.gen_range(-1i64..=1)).clamp(0, w as i64 - 1);
                stamp_disc(&mut mask, y as f32, x as f32, radius);
            }
        } else {
            let mut y = rng.gen_range(h as i64 / 4..(3 * h as i64 / 4).max(h as i64 / 4 + 1));
            for x in 0..w {
                y = (y + rng.gen_range(-1i64..=1)).clamp(0, h as i64 - 1);
                stamp_disc(&mut mask, y as f32, x as f32, radius);
            }
        }
    }
    mask
}

fn mask_abnormal_edges(h: usize, w: usize, intensity: f32, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let mut mask = Array2::<f32>::zeros((h, w));
    let base = 1.0 + intensity * 0.12 * h.min(w) as f32;
    let mut any = false;
    // Borders in fixed order: top, bottom, left, right.
    let mut chosen = [false; 4];
    for side in &mut chosen {
        *side = rng.gen_bool((0.3 + 0.5 * intensity as f64).min(1.0));
        any |= *side;
    }
    if !any {
        chosen[rng.gen_range(0..4)] = true;
    }
    for (side, &on) in chosen.iter().enumerate() {
        if !on {
            continue;
        }
        let along = if side < 2 { w } else { h };
        let profile = value_noise_1d(along, 8, rng);
        for (i, &level) in profile.iter().enumerate() {
            let depth = base * (0.4 + 0.6 * level);
            let span = if side < 2 { h } else { w };
            for t in 0..span {
                let v = (depth - t as f32).clamp(0.0, 1.0);
                if v <= 0.0 {
                    break;
                }
                let (y, x) = match side {
                    0 => (t, i),
                    1 => (h - 1 - t, i),
                    2 => (i, t),
                    _ => (i, w - 1 - t),
                };
                if v > mask[(y, x)] {
                    mask[(y, x)] = v;
                }
            }
        }
    }
    mask
}

fn mask_dense_white(h: usize, w: usize, intensity: f32, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let s1 = (h.min(w) / 4).max(4);
    let s2 = (s1 / 2).max(2);
    let s3 = (s2 / 2).max(1);
    let o1 = value_noise_2d(h, w, s1, rng);
    let o2 = value_noise_2d(h, w, s2, rng);
    let o3 = value_noise_2d(h, w, s3, rng);
    let cut = 1.0 - 0.75 * intensity;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let f = 0.5 * o1[(y, x)] + 0.3 * o2[(y, x)] + 0.2 * o3[(y, x)];
        ((f - cut) / 0.2).clamp(0.0, 1.0)
    })
}

fn mask_for(
    kind: NoiseKind,
    clean: &Array3<f32>,
    intensity: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f32>> {
    let (_, h, w) = clean.dim();
    match kind {
        NoiseKind::StrokeBroken => mask_stroke_broken(clean, intensity, rng),
        NoiseKind::BoneCracked => Ok(mask_bone_cracked(h, w, intensity, rng)),
        NoiseKind::AbnormalEdges => Ok(mask_abnormal_edges(h, w, intensity, rng)),
        NoiseKind::DenseWhite => Ok(mask_dense_white(h, w, intensity, rng)),
        NoiseKind::Mixed => {
            let mut chosen = [false; 4];
            let mut any = false;
            for side in &mut chosen {
                *side = rng.gen_bool(0.5);
                any |= *side;
            }
            if !any {
                chosen[rng.gen_range(0..4)] = true;
            }
            let mut mask = Array2::<f32>::zeros((h, w));
            for (i, &on) in chosen.iter().enumerate() {
                if !on {
                    continue;
                }
                let part = mask_for(NoiseKind::BASE[i], clean, intensity, rng)?;
                ndarray::Zip::from(&mut mask).and(&part).for_each(|m, &p| {
                    if p > *m {
                        *m = p;
                    }
                });
            }
            Ok(mask)
        }
    }
}

/// Composite a synthetic degradation onto a clean `(C, H, W)` image.
///
/// The output never falls below the input anywhere (noise only
/// whitens), pixels untouched by the mask are returned exactly, and
/// `intensity == 0` is the identity. The same `(spec, clean)` always
/// yields the same output.
pub fn synthesize_noise(clean: &Array3<f32>, spec: &NoiseSpec) -> Result<Array3<f32>> {
    if !(0.0..=1.0).contains(&spec.intensity) {
        return Err(Error::Config(format!(
            "noise intensity must lie in [0,1], got {}",
            spec.intensity
        )));
    }
    let (c, h, w) = clean.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "noise synthesis needs a non-empty image, got ({c}, {h}, {w})"
        )));
    }
    for &v in clean.iter() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!(
                "clean image values must lie in [0,1], found {v}"
            )));
        }
    }
    if spec.intensity == 0.0 {
        return Ok(clean.clone());
    }
    let mut rng = rng_for(spec);
    let mask = mask_for(spec.kind, clean, spec.intensity, &mut rng)?;
    let mut out = clean.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let m = mask[(y, x)];
                if m > 0.0 {
                    let v = out[(ch, y, x)];
                    out[(ch, y, x)] = v + m * (1.0 - v);
                }
            }
        }
    }
    Ok(out)
}
