//! Deterministic raster perturbations: aspect-ratio distortion, rotation
//! with canvas expansion, and seeded Gaussian noise.

use image::{imageops, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PerturbError;

/// Standard deviation of the additive Gaussian pixel noise.
pub const NOISE_STD: f64 = 25.0;

pub const MIN_ASPECT_RATIO: f64 = 0.5;
pub const MAX_ASPECT_RATIO: f64 = 1.5;
pub const MAX_ROTATION_DEG: f64 = 45.0;

/// How the aspect-ratio distortion is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// Scale width by sqrt(r) and height by 1/sqrt(r), keeping pixel count
    /// roughly constant while distorting shapes.
    #[default]
    AreaPreserving,
    /// Scale width by r and leave height untouched.
    WidthOnly,
}

/// Distorts the length-to-width ratio by `aspect_ratio` in [0.5, 1.5],
/// bilinear resampling. A ratio of exactly 1.0 returns the input unchanged.
pub fn resize_image(
    img: &RgbImage,
    aspect_ratio: f64,
    mode: ResizeMode,
) -> Result<RgbImage, PerturbError> {
    if !(MIN_ASPECT_RATIO..=MAX_ASPECT_RATIO).contains(&aspect_ratio) {
        return Err(PerturbError::RatioOutOfRange(aspect_ratio));
    }
    if img.width() == 0 || img.height() == 0 {
        return Err(PerturbError::EmptyImage);
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (new_w, new_h) = match mode {
        ResizeMode::AreaPreserving => {
            let s = aspect_ratio.sqrt();
            ((w * s).round() as u32, (h / s).round() as u32)
        }
        ResizeMode::WidthOnly => ((w * aspect_ratio).round() as u32, img.height()),
    };
    let new_w = new_w.max(1);
    let new_h = new_h.max(1);
    if (new_w, new_h) == (img.width(), img.height()) {
        return Ok(img.clone());
    }
    Ok(imageops::resize(img, new_w, new_h, imageops::FilterType::Triangle))
}

/// Rotates about the image center by `angle_deg` in [-45, 45], bilinear
/// resampling, canvas expanded to bound the rotated image, out-of-source
/// pixels black. 0 degrees returns the input byte-identical.
pub fn rotate_image(img: &RgbImage, angle_deg: f64) -> Result<RgbImage, PerturbError> {
    if !(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).contains(&angle_deg) {
        return Err(PerturbError::AngleOutOfRange(angle_deg));
    }
    if img.width() == 0 || img.height() == 0 {
        return Err(PerturbError::EmptyImage);
    }
    if angle_deg == 0.0 {
        return Ok(img.clone());
    }
    let theta = angle_deg.to_radians();
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let (w, h) = (img.width() as f64, img.height() as f64);
    let out_w = (w * cos_t.abs() + h * sin_t.abs()).ceil() as u32;
    let out_h = (w * sin_t.abs() + h * cos_t.abs()).ceil() as u32;

    let src_cx = (w - 1.0) / 2.0;
    let src_cy = (h - 1.0) / 2.0;
    let out_cx = (out_w as f64 - 1.0) / 2.0;
    let out_cy = (out_h as f64 - 1.0) / 2.0;

    let mut out = RgbImage::new(out_w, out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let dx = x as f64 - out_cx;
            let dy = y as f64 - out_cy;
            // Inverse rotation maps output coordinates back to the source.
            let src_x = src_cx + cos_t * dx + sin_t * dy;
            let src_y = src_cy - sin_t * dx + cos_t * dy;
            out.put_pixel(x, y, bilinear_sample(img, src_x, src_y));
        }
    }
    Ok(out)
}

fn bilinear_sample(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = [0.0f64; 3];
    for (dx, dy, weight) in [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
        (1.0, 0.0, fx * (1.0 - fy)),
        (0.0, 1.0, (1.0 - fx) * fy),
        (1.0, 1.0, fx * fy),
    ] {
        if weight == 0.0 {
            continue;
        }
        let sx = x0 + dx;
        let sy = y0 + dy;
        if sx < 0.0 || sy < 0.0 || sx >= img.width() as f64 || sy >= img.height() as f64 {
            continue; // outside the source: black
        }
        let p = img.get_pixel(sx as u32, sy as u32);
        for (a, &v) in acc.iter_mut().zip(&p.0) {
            *a += weight * v as f64;
        }
    }
    Rgb([
        acc[0].round().clamp(0.0, 255.0) as u8,
        acc[1].round().clamp(0.0, 255.0) as u8,
        acc[2].round().clamp(0.0, 255.0) as u8,
    ])
}

/// Encodes a raster losslessly as PNG (the wire format for perturbed
/// images).
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(img.clone())
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    bytes
}

/// Adds i.i.d. Gaussian(0, 25) noise per pixel and channel from a stream
/// seeded by `seed`, rounded and clamped to [0, 255].
pub fn add_noise(img: &RgbImage, seed: u64) -> RgbImage {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut out = img.clone();
    for pixel in out.pixels_mut() {
        for c in 0..3 {
            let noisy = pixel.0[c] as f64 + normal.sample(&mut rng);
            pixel.0[c] = noisy.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}
