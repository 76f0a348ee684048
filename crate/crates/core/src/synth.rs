//! Deterministic two-domain synthetic quality dataset.
//!
//! The source domain holds smooth, textured colour fields; the target domain
//! holds text-like pages (flat background, sharp dark glyph strokes). Both
//! are degraded by the same distortion families at graded levels, and the
//! ground-truth quality depends only on the level.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{write_manifest, write_scores};
use crate::error::{Error, Result};
use crate::image::{write_pnm, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distortion {
    Noise,
    Blur,
    Contrast,
}

impl std::str::FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "noise" => Ok(Distortion::Noise),
            "blur" => Ok(Distortion::Blur),
            "contrast" => Ok(Distortion::Contrast),
            other => Err(Error::Config(format!("unknown distortion {other:?}"))),
        }
    }
}

impl Distortion {
    pub fn name(self) -> &'static str {
        match self {
            Distortion::Noise => "noise",
            Distortion::Blur => "blur",
            Distortion::Contrast => "contrast",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Natural,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub images_per_domain: usize,
    pub size: usize,
    pub levels: usize,
    pub distortions: Vec<Distortion>,
    /// Standard deviation of the pseudo-score noise, as a fraction of the
    /// score range.
    pub pseudo_noise: f64,
    /// Typical side of the text panel overlaid on target images, as a
    /// fraction of the image side.
    pub panel_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            images_per_domain: 64,
            size: 32,
            levels: 8,
            distortions: vec![Distortion::Noise, Distortion::Blur, Distortion::Contrast],
            pseudo_noise: 0.15,
            panel_fraction: 0.7,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.images_per_domain == 0 {
            return Err(Error::Config("images_per_domain must be positive".into()));
        }
        if self.size < 11 {
            return Err(Error::Config(format!("image size {} is below 11", self.size)));
        }
        if self.levels < 2 {
            return Err(Error::Config("need at least 2 quality levels".into()));
        }
        if self.distortions.is_empty() {
            return Err(Error::Config("no distortion families".into()));
        }
        if !(self.panel_fraction > 0.0 && self.panel_fraction <= 1.0) {
            return Err(Error::Config("panel_fraction must lie in (0, 1]".into()));
        }
        if !(self.pseudo_noise >= 0.0 && self.pseudo_noise.is_finite()) {
            return Err(Error::Config("pseudo_noise must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticItem {
    pub id: String,
    pub image: Image,
    pub distortion: Distortion,
    pub level: usize,
    /// Ground-truth quality on a 1 to 5 scale.
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub source: Vec<SyntheticItem>,
    pub target: Vec<SyntheticItem>,
    /// Noisy stand-in scores for the target images.
    pub target_pseudo: Vec<f64>,
}

impl SyntheticSet {
    pub fn source_ids(&self) -> Vec<String> {
        self.source.iter().map(|i| i.id.clone()).collect()
    }

    pub fn target_ids(&self) -> Vec<String> {
        self.target.iter().map(|i| i.id.clone()).collect()
    }

    pub fn source_scores(&self) -> Vec<f64> {
        self.source.iter().map(|i| i.quality).collect()
    }

    pub fn target_truth(&self) -> Vec<f64> {
        self.target.iter().map(|i| i.quality).collect()
    }
}

/// Quality of a distortion level: 5 for pristine, 1 for the strongest.
pub fn quality_of_level(level: usize, levels: usize) -> f64 {
    5.0 - 4.0 * level as f64 / (levels - 1) as f64
}

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

/// Separable Gaussian blur with symmetric borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..img.channels() {
        let src = img.plane(c).to_vec();
        let mut tmp = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                tmp[i * w + j] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * src[i * w + reflect(j as isize + k as isize - r, w)])
                    .sum();
            }
        }
        let dst = &mut out.data_mut()[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[reflect(i as isize + k as isize - r, h) * w + j])
                    .sum();
            }
        }
    }
    out
}

/// Smooth colour field with soft blobs, hard-edged discs, a gradient and
/// fine texture.
pub fn natural_content(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let n = size as f64;
    let mut data = vec![0.0; 3 * size * size];
    let base: [f64; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    let grad: [f64; 2] = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..n),
                rng.random_range(0.0..n),
                rng.random_range(0.15..0.4) * n,
                [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)],
            )
        })
        .collect();
    // hard-edged discs standing in for object boundaries
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..4))
        .map(|_| {
            (
                rng.random_range(0.0..n),
                rng.random_range(0.0..n),
                rng.random_range(0.12..0.3) * n,
                [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
            )
        })
        .collect();
    let freq: [f64; 2] = [rng.random_range(0.6..1.4), rng.random_range(0.6..1.4)];
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let texture = Normal::new(0.0, 0.04).expect("valid std");
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64 / n - 0.5, j as f64 / n - 0.5);
            let mut shade = grad[0] * x + grad[1] * y;
            shade += 0.05 * (freq[0] * j as f64 + freq[1] * i as f64 + phase).sin();
            shade += texture.sample(rng);
            for c in 0..3 {
                let mut v = base[c] + shade;
                for (by, bx, br, col) in &blobs {
                    let d2 = (i as f64 - by).powi(2) + (j as f64 - bx).powi(2);
                    v += col[c] * (-d2 / (2.0 * br * br)).exp();
                }
                for (dy, dx, dr, col) in &discs {
                    if (i as f64 - dy).powi(2) + (j as f64 - dx).powi(2) < dr * dr {
                        v += col[c];
                    }
                }
                data[(c * size + i) * size + j] = v.clamp(0.05, 0.95);
            }
        }
    }
    Image::new(3, size, size, data).expect("consistent size")
}

/// Overlay a light text panel with lines of dark glyph strokes on `base`.
pub fn text_overlay(base: &Image, panel_fraction: f64, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (base.height(), base.width());
    let mut side = |n: usize| ((n as f64 * panel_fraction * rng.random_range(0.85..1.15)) as usize).clamp(1, n);
    let ph = side(h);
    let pw = side(w);
    let (top, left) = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
    let bg = rng.random_range(0.7..0.85);
    let ink: [f64; 3] = {
        let k = rng.random_range(0.05..0.25);
        [k, k, k + rng.random_range(0.0..0.2)]
    };
    let mut out = base.clone();
    let data = out.data_mut();
    let put = |data: &mut [f64], i: usize, j: usize, col: [f64; 3]| {
        for (c, v) in col.iter().enumerate() {
            data[(c * h + i) * w + j] = *v;
        }
    };
    for i in top..top + ph {
        for j in left..left + pw {
            put(data, i, j, [bg; 3]);
        }
    }
    let line_height = rng.random_range(5..8);
    let mut row = top + 2;
    while row + line_height <= top + ph {
        let glyph_h = line_height - 2;
        let mut j = left + rng.random_range(1..3);
        let end = left + pw - rng.random_range(1..4);
        while j + 3 < end {
            let glyph_w = rng.random_range(2..4);
            // vertical stems and a horizontal bar per glyph
            for gi in 0..glyph_h {
                put(data, row + gi, j, ink);
                if rng.random_bool(0.5) {
                    put(data, row + gi, j + glyph_w - 1, ink);
                }
            }
            let bar_row = row + rng.random_range(0..glyph_h);
            for gj in 0..glyph_w {
                put(data, bar_row, j + gj, ink);
            }
            j += glyph_w + rng.random_range(1..3);
            if rng.random_bool(0.15) {
                j += 2;
            }
        }
        row += line_height;
    }
    out
}

/// Degrade `img` with strength in `[0, 1]`.
pub fn apply_distortion(img: &Image, d: Distortion, strength: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut out = match d {
        Distortion::Noise => {
            let mut o = img.clone();
            if strength > 0.0 {
                let noise = Normal::new(0.0, 0.2 * strength).expect("valid std");
                for v in o.data_mut() {
                    *v += noise.sample(rng);
                }
            }
            o
        }
        Distortion::Blur => gaussian_blur(img, 2.0 * strength),
        Distortion::Contrast => {
            let mut o = img.clone();
            let k = 1.0 - 0.8 * strength;
            let plane = img.height() * img.width();
            for c in 0..img.channels() {
                let p = &mut o.data_mut()[c * plane..(c + 1) * plane];
                let m = p.iter().sum::<f64>() / plane as f64;
                for v in p.iter_mut() {
                    *v = m + (*v - m) * k;
                }
            }
            o
        }
    };
    out.quantize_8bit();
    out
}

fn domain_rng(seed: u64, domain: Domain) -> ChaCha8Rng {
    let tag = match domain {
        Domain::Natural => 0x5EED_0001,
        Domain::Text => 0x5EED_0002,
    };
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

fn generate_domain(spec: &SyntheticSpec, domain: Domain) -> Vec<SyntheticItem> {
    let mut rng = domain_rng(spec.seed, domain);
    let prefix = match domain {
        Domain::Natural => "src",
        Domain::Text => "tgt",
    };
    (0..spec.images_per_domain)
        .map(|i| {
            let level = i % spec.levels;
            let distortion = spec.distortions[(i / spec.levels) % spec.distortions.len()];
            let clean = match domain {
                Domain::Natural => natural_content(&mut rng, spec.size),
                Domain::Text => {
                    let base = natural_content(&mut rng, spec.size);
                    text_overlay(&base, spec.panel_fraction, &mut rng)
                }
            };
            let strength = level as f64 / (spec.levels - 1) as f64;
            SyntheticItem {
                id: format!("images/{prefix}_{i:04}.ppm"),
                image: apply_distortion(&clean, distortion, strength, &mut rng),
                distortion,
                level,
                quality: quality_of_level(level, spec.levels),
            }
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    spec.validate()?;
    let source = generate_domain(spec, Domain::Natural);
    let target = generate_domain(spec, Domain::Text);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0003);
    let noise = Normal::new(0.0, 4.0 * spec.pseudo_noise).map_err(|e| Error::Config(e.to_string()))?;
    let target_pseudo = target.iter().map(|t| t.quality + noise.sample(&mut rng)).collect();
    Ok(SyntheticSet {
        source,
        target,
        target_pseudo,
    })
}

/// File names written by [`write_synthetic`].
pub const SOURCE_MANIFEST: &str = "source.csv";
pub const TARGET_MANIFEST: &str = "target.csv";
pub const TARGET_TRUTH: &str = "target_truth.csv";
pub const PSEUDO_MANIFEST: &str = "pseudo.csv";

pub fn write_synthetic(set: &SyntheticSet, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for item in set.source.iter().chain(&set.target) {
        write_pnm(&dir.join(&item.id), &item.image)?;
    }
    write_scores(&dir.join(SOURCE_MANIFEST), &set.source_ids(), &set.source_scores())?;
    let none = vec![None; set.target.len()];
    write_manifest(&dir.join(TARGET_MANIFEST), &set.target_ids(), &none)?;
    write_scores(&dir.join(TARGET_TRUTH), &set.target_ids(), &set.target_truth())?;
    write_scores(&dir.join(PSEUDO_MANIFEST), &set.target_ids(), &set.target_pseudo)?;
    Ok(())
}
