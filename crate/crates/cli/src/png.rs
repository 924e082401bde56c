//! 8-bit grayscale PNG renderings: magnitude images, error maps and loss
//! curves.

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma};
use spicer_core::ComplexImage;

/// Error maps saturate at this fraction of the reference maximum so maps
/// from different methods share one scale.
pub const ERROR_MAP_FRACTION: f64 = 0.1;

pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .expect("in-memory PNG encoding cannot fail");
    out
}

fn to_gray(values: &[f64], height: usize, width: usize, lo: f64, hi: f64) -> GrayImage {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = values
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage::from_raw(width as u32, height as u32, pixels).expect("buffer matches dimensions")
}

/// Magnitude, min-max scaled over `region` (the whole frame when `None`).
pub fn magnitude(img: &ComplexImage, region: Option<&[bool]>) -> GrayImage {
    let mag = img.magnitude();
    let inside = |i: usize| region.is_none_or(|r| r[i]);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &v) in mag.iter().enumerate() {
        if inside(i) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    to_gray(&mag, img.height(), img.width(), lo, hi)
}

/// `| |recon| − |reference| |`, white at [`ERROR_MAP_FRACTION`] of the
/// reference maximum.
pub fn error_map(recon: &ComplexImage, reference: &ComplexImage) -> GrayImage {
    let (a, b) = (recon.magnitude(), reference.magnitude());
    let peak = b.iter().cloned().fold(0.0, f64::max);
    let err: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect();
    to_gray(&err, recon.height(), recon.width(), 0.0, ERROR_MAP_FRACTION * peak)
}

/// Loss per epoch as a black polyline on white, y axis spanning the
/// observed range.
pub fn loss_curve(history: &[f64]) -> GrayImage {
    const W: u32 = 480;
    const H: u32 = 320;
    const MARGIN: u32 = 24;
    let mut img = GrayImage::from_pixel(W, H, Luma([255]));
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, Luma([128]));
    }
    for y in MARGIN..=H - MARGIN {
        img.put_pixel(MARGIN, y, Luma([128]));
    }
    let finite: Vec<f64> = history.iter().cloned().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return img;
    }
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (pw, ph) = ((W - 2 * MARGIN) as f64, (H - 2 * MARGIN) as f64);
    let n = history.len().max(2) - 1;
    let point = |i: usize, v: f64| {
        let x = MARGIN as f64 + pw * i as f64 / n as f64;
        let y = (H - MARGIN) as f64 - ph * (v - lo) / span;
        (x, y)
    };
    let mut prev = point(0, history[0]);
    for (i, &v) in history.iter().enumerate().skip(1) {
        let next = point(i, v);
        let steps = ((next.0 - prev.0).abs().max((next.1 - prev.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (x, y) = (prev.0 + t * (next.0 - prev.0), prev.1 + t * (next.1 - prev.1));
            img.put_pixel(x.round() as u32, (y.round() as u32).min(H - 1), Luma([0]));
        }
        prev = next;
    }
    if history.len() == 1 {
        img.put_pixel(prev.0 as u32, prev.1 as u32, Luma([0]));
    }
    img
}
