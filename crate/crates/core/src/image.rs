//! Image buffers and plain-text PNM (PGM/PPM) reading and writing.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Planar `[C, H, W]` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Single-channel image used by SSIM and the naturalness statistics. The
/// value range depends on the caller (`[0, 1]` or `[0, 255]`).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "gray image {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width
        {
            return Err(Error::InvalidInput(format!(
                "image {channels}x{height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Luminance with BT.601 weights; single-channel images pass through.
    pub fn to_gray(&self) -> GrayImage {
        let n = self.height * self.width;
        let data = if self.channels >= 3 {
            (0..n)
                .map(|i| {
                    0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i]
                })
                .collect()
        } else {
            self.data[..n].to_vec()
        };
        GrayImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Replicate a gray image into three channels.
    pub fn from_gray(g: &GrayImage) -> Self {
        let mut data = Vec::with_capacity(3 * g.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&g.data);
        }
        Self {
            channels: 3,
            height: g.height,
            width: g.width,
            data,
        }
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("resize to an empty image".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut data = vec![0.0; self.channels * height * width];
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for c in 0..self.channels {
            let src = self.plane(c);
            for i in 0..height {
                let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let wy = fy - y0 as f64;
                for j in 0..width {
                    let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let wx = fx - x0 as f64;
                    let top = src[y0 * self.width + x0] * (1.0 - wx) + src[y0 * self.width + x1] * wx;
                    let bot = src[y1 * self.width + x0] * (1.0 - wx) + src[y1 * self.width + x1] * wx;
                    data[(c * height + i) * width + j] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        Ok(Self {
            channels: self.channels,
            height,
            width,
            data,
        })
    }

    /// Round every value to the nearest 8-bit level so that a PNM write/read
    /// round trip is lossless.
    pub fn quantize_8bit(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn validate_rgb(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::InvalidInput(format!(
                "expected 3 channels, got {}",
                self.channels
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(())
    }
}

/// Loader extension point for image formats other than PNM.
pub trait ImageLoader {
    fn load(&self, path: &Path) -> Result<Image>;
}

/// Reads P2/P3 (plain) and P5/P6 (raw 8-bit) netpbm files.
#[derive(Debug, Default, Clone, Copy)]
pub struct PnmLoader;

impl ImageLoader for PnmLoader {
    fn load(&self, path: &Path) -> Result<Image> {
        read_pnm(path)
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|m| parse_err(path, m))
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut header = Vec::new();
    // magic, width, height, maxval; comments start with '#'
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let channels = match header[0].as_str() {
        "P2" | "P5" => 1,
        "P3" | "P6" => 3,
        m => return Err(format!("unsupported magic {m}")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s}"));
    let (width, height, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(format!("unsupported geometry {width}x{height} max {maxval}"));
    }
    let n = width * height * channels;
    let raw: Vec<u32> = if header[0] == "P2" || header[0] == "P3" {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| "non-utf8 body".to_string())?;
        let vals: std::result::Result<Vec<u32>, _> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace)
            .map(str::parse::<u32>)
            .collect();
        vals.map_err(|_| "bad pixel value".to_string())?
    } else {
        let body = &bytes[(pos + 1).min(bytes.len())..];
        body.iter().map(|&b| b as u32).collect()
    };
    if raw.len() < n {
        return Err(format!("expected {n} samples, found {}", raw.len()));
    }
    // interleaved -> planar
    let mut data = vec![0.0; n];
    let plane = width * height;
    for (i, v) in raw[..n].iter().enumerate() {
        if *v as usize > maxval {
            return Err(format!("sample {v} exceeds maxval {maxval}"));
        }
        let (p, c) = (i / channels, i % channels);
        data[c * plane + p] = *v as f64 / maxval as f64;
    }
    Image::new(channels, height, width, data).map_err(|e| e.to_string())
}

/// Plain-text PNM encoding (P3 for three channels, P2 for one).
pub fn encode_pnm(img: &Image) -> String {
    let magic = if img.channels == 1 { "P2" } else { "P3" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height);
    let plane = img.width * img.height;
    let channels = img.channels.min(3);
    for i in 0..img.height {
        let mut line = String::new();
        for j in 0..img.width {
            for c in 0..channels {
                let v = (img.data[c * plane + i * img.width + j].clamp(0.0, 1.0) * 255.0).round();
                if !line.is_empty() {
                    line.push(' ');
                }
                let _ = write!(line, "{}", v as u32);
            }
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}
