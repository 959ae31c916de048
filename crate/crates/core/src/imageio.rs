//! PNG encoding and decoding for panels and diagnostics.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn unit_to_u8(x: f32) -> u8 {
    (f64::from(x).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Squashes an unbounded pixel value into `(0, 1)` for display.
fn logistic(x: f32) -> f32 {
    (1.0 / (1.0 + (-f64::from(x)).exp())) as f32
}

/// Saves a decoded panel (`(H, W, 3)`, unbounded reals) as an 8-bit PNG,
/// mapping values through a logistic squash. Deterministic for equal inputs.
pub fn save_panel_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected 3 channels, got {c}"
        )));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgb([
            unit_to_u8(logistic(pixels[[r, c, 0]])),
            unit_to_u8(logistic(pixels[[r, c, 1]])),
            unit_to_u8(logistic(pixels[[r, c, 2]])),
        ])
    });
    img.save(path)?;
    Ok(())
}

/// Saves a `(H, W)` grid already in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_unit_gray_png(path: &Path, grid: &Array2<f32>) -> Result<()> {
    let (h, w) = grid.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([unit_to_u8(grid[[y as usize, x as usize]])])
    });
    img.save(path)?;
    Ok(())
}

/// Saves a `(H, W, 3)` grid already in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_unit_rgb_png(path: &Path, grid: &Array3<f32>) -> Result<()> {
    let (h, w, c) = grid.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected 3 channels, got {c}"
        )));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgb([
            unit_to_u8(grid[[r, c, 0]]),
            unit_to_u8(grid[[r, c, 1]]),
            unit_to_u8(grid[[r, c, 2]]),
        ])
    });
    img.save(path)?;
    Ok(())
}

/// Loads an RGB PNG as `(H, W, 3)` with channels scaled to `[0, 1]`.
pub fn load_rgb_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(r, c, ch)| f32::from(img.get_pixel(c as u32, r as u32)[ch]) / 255.0,
    ))
}
