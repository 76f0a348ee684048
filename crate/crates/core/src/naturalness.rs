//! MSCN naturalness maps and their pooled value distribution.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Half width of the local window (7×7).
pub const RADIUS: usize = 3;
pub const WINDOW_SIGMA: f64 = 7.0 / 6.0;
pub const BINS: usize = 101;
pub const RANGE: (f64, f64) = (-3.0, 3.0);

fn window() -> Vec<f64> {
    let n = 2 * RADIUS + 1;
    let mut w = Vec::with_capacity(n * n);
    for u in 0..n {
        for v in 0..n {
            let (y, x) = (u as f64 - RADIUS as f64, v as f64 - RADIUS as f64);
            w.push((-(x * x + y * y) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Symmetric reflection that repeats the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// `ψ = (I − μ) / (σ + 1)` with Gaussian-weighted local mean and deviation.
/// Pixels are expected on the `[0, 255]` scale.
pub fn mscn_map(img: &GrayImage) -> Result<GrayImage> {
    let n = 2 * RADIUS + 1;
    if img.height < n || img.width < n {
        return Err(Error::InvalidInput(format!(
            "naturalness map needs at least {n}x{n} pixels, got {}x{}",
            img.height, img.width
        )));
    }
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image pixels".into()));
    }
    let w = window();
    let mut out = vec![0.0; img.data.len()];
    let mut patch = vec![0.0; n * n];
    for i in 0..img.height {
        for j in 0..img.width {
            let centre = img.at(i, j);
            for u in 0..n {
                let r = reflect(i as isize + u as isize - RADIUS as isize, img.height);
                for v in 0..n {
                    let c = reflect(j as isize + v as isize - RADIUS as isize, img.width);
                    patch[u * n + v] = img.at(r, c);
                }
            }
            // offsets from the centre keep flat regions exactly zero
            let mu = centre + w.iter().zip(&patch).map(|(a, p)| a * (p - centre)).sum::<f64>();
            let var: f64 = w.iter().zip(&patch).map(|(a, p)| a * (p - mu) * (p - mu)).sum();
            out[i * img.width + j] = (centre - mu) / (var.sqrt() + 1.0);
        }
    }
    GrayImage::new(img.height, img.width, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaturalnessHistogram {
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    /// Pearson kurtosis (3 for a Gaussian).
    pub kurtosis: f64,
}

impl NaturalnessHistogram {
    pub fn bin_of(v: f64) -> usize {
        let (lo, hi) = RANGE;
        let t = ((v - lo) / (hi - lo) * BINS as f64).floor();
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(BINS - 1)
        }
    }

    pub fn bin_centers() -> Vec<f64> {
        let (lo, hi) = RANGE;
        let width = (hi - lo) / BINS as f64;
        (0..BINS).map(|b| lo + (b as f64 + 0.5) * width).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn density(&self) -> Vec<f64> {
        let t = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    /// Moments of the binned distribution, using bin centres.
    pub fn moments(&self) -> Result<Moments> {
        let centers = Self::bin_centers();
        let p = self.density();
        let mean: f64 = centers.iter().zip(&p).map(|(c, p)| c * p).sum();
        let central = |k: i32| -> f64 {
            centers
                .iter()
                .zip(&p)
                .map(|(c, p)| p * (c - mean).powi(k))
                .sum()
        };
        let variance = central(2);
        if variance <= 0.0 {
            return Err(Error::Degenerate(
                "naturalness distribution has zero spread".into(),
            ));
        }
        Ok(Moments {
            mean,
            variance,
            skewness: central(3) / variance.powf(1.5),
            kurtosis: central(4) / (variance * variance),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,density\n");
        for (c, d) in Self::bin_centers().iter().zip(self.density()) {
            let _ = writeln!(out, "{c},{d}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Pooled histogram of every ψ value over `[−3, 3]` with values outside the
/// range clipped into the end bins.
pub fn dnv_histogram(maps: &[GrayImage]) -> Result<NaturalnessHistogram> {
    if maps.is_empty() || maps.iter().all(|m| m.data.is_empty()) {
        return Err(Error::InvalidInput("no naturalness maps to histogram".into()));
    }
    let mut counts = vec![0u64; BINS];
    for m in maps {
        for &v in &m.data {
            counts[NaturalnessHistogram::bin_of(v)] += 1;
        }
    }
    Ok(NaturalnessHistogram { counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn window_is_normalized() {
        let w = window();
        assert_eq!(w.len(), 49);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_image_is_exactly_zero() {
        for c in [0.0, 17.3, 255.0] {
            let psi = mscn_map(&GrayImage::filled(9, 11, c)).unwrap();
            assert!(psi.data.iter().all(|v| *v == 0.0));
        }
        let h = dnv_histogram(&[mscn_map(&GrayImage::filled(9, 9, 40.0)).unwrap()]).unwrap();
        assert_eq!(h.counts[50], 81);
        assert_eq!(h.total(), 81);
    }

    #[test]
    fn bright_pixel_matches_direct_window() {
        let mut img = GrayImage::filled(15, 15, 0.0);
        img.data[7 * 15 + 7] = 255.0;
        let psi = mscn_map(&img).unwrap();
        // no reflection reaches the centre window
        let w = window();
        let mu = 255.0 * w[24];
        let var: f64 = w
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let p = if k == 24 { 255.0 } else { 0.0 };
                a * (p - mu) * (p - mu)
            })
            .sum();
        let expected = (255.0 - mu) / (var.sqrt() + 1.0);
        assert!((psi.at(7, 7) - expected).abs() < 1e-9);
        assert!(psi.at(7, 7) > 0.0);
    }

    #[test]
    fn interior_is_translation_consistent() {
        let f = |i: usize, j: usize| ((i * 31 + j * 17) % 23) as f64 * 11.0;
        let a = GrayImage::new(20, 20, (0..400).map(|k| f(k / 20, k % 20)).collect()).unwrap();
        let b = GrayImage::new(20, 20, (0..400).map(|k| f(k / 20 + 2, k % 20 + 1)).collect()).unwrap();
        let (pa, pb) = (mscn_map(&a).unwrap(), mscn_map(&b).unwrap());
        for i in 3..14 {
            for j in 3..15 {
                assert!((pa.at(i + 2, j + 1) - pb.at(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn histogram_clips_and_adds() {
        let a = GrayImage::new(1, 4, vec![-10.0, -3.0, 2.99, 10.0]).unwrap();
        let b = GrayImage::new(1, 2, vec![0.0, 0.01]).unwrap();
        let ha = dnv_histogram(&[a.clone()]).unwrap();
        let hb = dnv_histogram(&[b.clone()]).unwrap();
        let hab = dnv_histogram(&[a, b]).unwrap();
        assert_eq!(ha.counts[0], 2);
        assert_eq!(ha.counts[100], 2);
        let sum: Vec<u64> = ha.counts.iter().zip(&hb.counts).map(|(x, y)| x + y).collect();
        assert_eq!(hab.counts, sum);
        assert!((hab.density().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(dnv_histogram(&[]).is_err());
    }

    #[test]
    fn gaussian_noise_is_nearly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = Normal::new(128.0, 20.0).unwrap();
        let img = GrayImage::new(256, 256, (0..65536).map(|_| normal.sample(&mut rng)).collect())
            .unwrap();
        let m = dnv_histogram(&[mscn_map(&img).unwrap()]).unwrap().moments().unwrap();
        assert!(m.skewness.abs() < 0.1, "{m:?}");
    }

    #[test]
    fn csv_layout() {
        let h = dnv_histogram(&[GrayImage::filled(1, 1, 0.0)]).unwrap();
        let csv = h.to_csv();
        assert!(csv.starts_with("bin_center,density\n"));
        assert_eq!(csv.lines().count(), BINS + 1);
        assert!(matches!(h.moments(), Err(Error::Degenerate(_))));
    }
}
