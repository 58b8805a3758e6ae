//! Procedural glyph images: light angular strokes on a dark textured
//! ground, shaped like rubbings of engraved characters. Used to build
//! self-contained datasets for smoke training and invariant suites.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::manifest::{skeleton_from_clean, SampleRecord, Split};
use super::noise::{synthesize_noise, NoiseKind, NoiseSpec};

/// Stamp a soft disc carrying `value` at `(cy, cx)`, keeping the
/// pointwise maximum against what is already drawn.
fn stamp(canvas: &mut Array2<f32>, cy: f32, cx: f32, r: f32, value: f32) {
    let (h, w) = canvas.dim();
    if h == 0 || w == 0 {
        return;
    }
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil() as usize).min(h - 1);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
            let v = value * (r + 0.5 - d).clamp(0.0, 1.0);
            if v > canvas[(y, x)] {
                canvas[(y, x)] = v;
            }
        }
    }
}

/// Generate a deterministic glyph-like image as `(3, H, W)` planes in
/// `[0,1]`: a handful of connected angular strokes, bright on dark.
pub fn generate_glyph(height: usize, width: usize, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = Array2::from_shape_fn((height, width), |_| 0.02 + rng.gen::<f32>() * 0.08);
    let span = height.min(width) as f32;
    let strokes = rng.gen_range(3..=7);
    for _ in 0..strokes {
        let mut y = (0.15 + 0.7 * rng.gen::<f32>()) * height as f32;
        let mut x = (0.15 + 0.7 * rng.gen::<f32>()) * width as f32;
        let shade = 0.82 + 0.15 * rng.gen::<f32>();
        let radius = 0.6 + rng.gen::<f32>();
        let segments = rng.gen_range(1..=3);
        for _ in 0..segments {
            let angle = rng.gen_range(0..12) as f32 * std::f32::consts::FRAC_PI_6
                + (rng.gen::<f32>() - 0.5) * 0.3;
            let length = (0.12 + 0.25 * rng.gen::<f32>()) * span;
            let steps = (length * 2.0).ceil() as usize;
            let (dy, dx) = (angle.sin() * 0.5, angle.cos() * 0.5);
            for _ in 0..steps {
                y = (y + dy).clamp(0.0, height as f32 - 1.0);
                x = (x + dx).clamp(0.0, width as f32 - 1.0);
                stamp(&mut canvas, y, x, radius, shade);
            }
        }
    }
    Array3::from_shape_fn((3, height, width), |(_, y, x)| canvas[(y, x)])
}

fn blend(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Build a fully in-memory dataset of `count` glyphs with synthesized
/// degradations and derived skeleton targets. All records are labelled
/// `Train`; callers repartition as needed.
pub fn synthetic_dataset(
    count: usize,
    height: usize,
    width: usize,
    kind: NoiseKind,
    intensity: f32,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let clean = generate_glyph(height, width, blend(seed, i as u64));
        let spec = NoiseSpec::new(kind, intensity, blend(seed, 0x5EED + i as u64));
        let noisy = synthesize_noise(&clean, &spec)?;
        let skeleton = skeleton_from_clean(&clean)?;
        records.push(SampleRecord {
            id: format!("glyph{i:04}"),
            split: Split::Train,
            noisy,
            clean,
            skeleton,
            source: "synthetic".into(),
        });
    }
    Ok(records)
}
