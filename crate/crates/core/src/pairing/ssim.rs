//! Mean SSIM with an 11×11 Gaussian window (σ = 1.5) over the valid region.

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub(crate) fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - c;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering; output is `(h−k+1) × (w−k+1)`.
fn filter_valid(data: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        let src = &data[i * w..(i + 1) * w];
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().zip(&src[j..j + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for (t, tap) in taps.iter().enumerate() {
            let src = &rows[(i + t) * ow..(i + t + 1) * ow];
            let dst = &mut out[i * ow..(i + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += tap * s;
            }
        }
    }
    out
}

/// Per-image filtered moments, reusable across many comparisons.
#[derive(Debug, Clone)]
pub struct SsimPrepared {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    mu: Vec<f64>,
    sq: Vec<f64>,
}

impl SsimPrepared {
    pub fn new(img: &GrayImage) -> Result<Self> {
        if img.height < WINDOW || img.width < WINDOW {
            return Err(Error::InvalidInput(format!(
                "SSIM needs at least {WINDOW}x{WINDOW} pixels, got {}x{}",
                img.height, img.width
            )));
        }
        let taps = gaussian_taps(WINDOW, WINDOW_SIGMA);
        let squares: Vec<f64> = img.data.iter().map(|v| v * v).collect();
        Ok(Self {
            height: img.height,
            width: img.width,
            pixels: img.data.clone(),
            mu: filter_valid(&img.data, img.height, img.width, &taps),
            sq: filter_valid(&squares, img.height, img.width, &taps),
        })
    }

    pub fn ssim(&self, other: &SsimPrepared) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::ShapeMismatch {
                op: "ssim",
                left: vec![self.height, self.width],
                right: vec![other.height, other.width],
            });
        }
        let taps = gaussian_taps(WINDOW, WINDOW_SIGMA);
        let prod: Vec<f64> = self.pixels.iter().zip(&other.pixels).map(|(a, b)| a * b).collect();
        let cross = filter_valid(&prod, self.height, self.width, &taps);
        let mut total = 0.0;
        for k in 0..cross.len() {
            let (mx, my) = (self.mu[k], other.mu[k]);
            let vx = self.sq[k] - mx * mx;
            let vy = other.sq[k] - my * my;
            let cxy = cross[k] - mx * my;
            total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
        Ok(total / cross.len() as f64)
    }
}

/// Structural similarity of two equally sized gray images in `[0, 1]`.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: vec![a.height, a.width],
            right: vec![b.height, b.width],
        });
    }
    SsimPrepared::new(a)?.ssim(&SsimPrepared::new(b)?)
}
