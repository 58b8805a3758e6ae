//! PNG decoding/encoding to and from `[0,1]` float planes, plus the
//! bilinear resize used at ingestion.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};

/// Decode a PNG as RGB planes `(3, H, W)` in `[0,1]`; grey and paletted
/// inputs are expanded.
pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ingest(path, format!("cannot decode: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Decode a PNG as a single luminance plane `(1, H, W)` in `[0,1]`.
pub fn read_gray(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ingest(path, format!("cannot decode: {e}")))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((1, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[(0, y as usize, x as usize)] = px.0[0] as f32 / 255.0;
    }
    Ok(out)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode `(1 or 3, H, W)` planes in `[0,1]` as an 8-bit PNG.
pub fn write_png(path: &Path, planes: &Array3<f32>) -> Result<()> {
    let (c, h, w) = planes.dim();
    match c {
        3 => {
            let mut img = RgbImage::new(w as u32, h as u32);
            for (x, y, px) in img.enumerate_pixels_mut() {
                for ch in 0..3 {
                    px.0[ch] = to_u8(planes[(ch, y as usize, x as usize)]);
                }
            }
            img.save(path)
                .map_err(|e| Error::io(path, std::io::Error::other(e)))
        }
        1 => {
            let mut img = GrayImage::new(w as u32, h as u32);
            for (x, y, px) in img.enumerate_pixels_mut() {
                px.0[0] = to_u8(planes[(0, y as usize, x as usize)]);
            }
            img.save(path)
                .map_err(|e| Error::io(path, std::io::Error::other(e)))
        }
        other => Err(Error::Shape(format!(
            "png encoding expects 1 or 3 planes, got {other}"
        ))),
    }
}

/// Bilinear resize of `(1 or 3, H, W)` planes to `(height, width)`.
pub fn resize_bilinear(planes: &Array3<f32>, height: usize, width: usize) -> Result<Array3<f32>> {
    let (c, h, w) = planes.dim();
    if h == 0 || w == 0 || height == 0 || width == 0 {
        return Err(Error::Shape(format!(
            "cannot resize {h}x{w} to {height}x{width}: empty extent"
        )));
    }
    if (h, w) == (height, width) {
        return Ok(planes.clone());
    }
    match c {
        3 => {
            let mut img: ImageBuffer<Rgb<f32>, Vec<f32>> =
                ImageBuffer::new(w as u32, h as u32);
            for (x, y, px) in img.enumerate_pixels_mut() {
                for ch in 0..3 {
                    px.0[ch] = planes[(ch, y as usize, x as usize)];
                }
            }
            let resized = image::imageops::resize(
                &img,
                width as u32,
                height as u32,
                FilterType::Triangle,
            );
            let mut out = Array3::<f32>::zeros((3, height, width));
            for (x, y, px) in resized.enumerate_pixels() {
                for ch in 0..3 {
                    out[(ch, y as usize, x as usize)] = px.0[ch];
                }
            }
            Ok(out)
        }
        1 => {
            let mut img: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::new(w as u32, h as u32);
            for (x, y, px) in img.enumerate_pixels_mut() {
                px.0[0] = planes[(0, y as usize, x as usize)];
            }
            let resized = image::imageops::resize(
                &img,
                width as u32,
                height as u32,
                FilterType::Triangle,
            );
            let mut out = Array3::<f32>::zeros((1, height, width));
            for (x, y, px) in resized.enumerate_pixels() {
                out[(0, y as usize, x as usize)] = px.0[0];
            }
            Ok(out)
        }
        other => Err(Error::Shape(format!(
            "resize expects 1 or 3 planes, got {other}"
        ))),
    }
}

/// Lossless u8 round-trip helper for callers that need byte-stable
/// outputs: quantize to the PNG grid without touching disk.
pub fn quantize_to_u8_grid(planes: &Array3<f32>) -> Array3<f32> {
    planes.mapv(|v| to_u8(v) as f32 / 255.0)
}
