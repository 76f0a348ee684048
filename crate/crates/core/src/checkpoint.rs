//! Versioned text checkpoint.
//!
//! ```text
//! rankuda-checkpoint 1
//! config input_size 32
//! config scale_factor 3fd0000000000000
//! ...
//! tensor enc.conv0.weight 12,3,3,3
//! 3fb2f1a9fbe76c8b bfa4...
//! end
//! ```
//!
//! Floats are stored as the hex of their IEEE-754 bits, so export and
//! import round-trip exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::encoder::{EncoderConfig, ModelState};
use crate::error::{Error, Result};

pub const MAGIC: &str = "rankuda-checkpoint";
pub const VERSION: u32 = 1;

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unhex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Checkpoint(format!("bad float word {s:?}")))
}

pub fn encode_checkpoint(state: &ModelState) -> String {
    let c = state.config();
    let mut out = format!("{MAGIC} {VERSION}\n");
    let _ = writeln!(out, "config input_size {}", c.input_size);
    let _ = writeln!(out, "config scale_factor {}", hex(c.scale_factor));
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let _ = writeln!(out, "config channel_widths {}", join(&c.channel_widths));
    let _ = writeln!(out, "config fc_widths {}", join(&c.fc_widths));
    let _ = writeln!(out, "config feature_dim {}", c.feature_dim);
    let _ = writeln!(out, "config target_hidden {}", c.target_hidden);
    for (name, t) in state.params() {
        let _ = writeln!(out, "tensor {name} {}", join(t.shape()));
        let words: Vec<String> = t.data().iter().map(|v| hex(*v)).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad dimension list {s:?}")))
        })
        .collect()
}

fn fixed<const N: usize>(s: &str) -> Result<[usize; N]> {
    parse_dims(s)?
        .try_into()
        .map_err(|_| Error::Checkpoint(format!("expected {N} widths in {s:?}")))
}

pub fn decode_checkpoint(text: &str) -> Result<ModelState> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let mut hp = header.split_whitespace();
    if hp.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("missing checkpoint header".into()));
    }
    match hp.next().and_then(|v| v.parse::<u32>().ok()) {
        Some(VERSION) => {}
        other => return Err(Error::Checkpoint(format!("unsupported version {other:?}"))),
    }
    let mut cfg: BTreeMap<String, String> = BTreeMap::new();
    let mut params = BTreeMap::new();
    let mut ended = false;
    while let Some(line) = lines.next() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("config") => {
                let key = parts.next().unwrap_or_default().to_string();
                let val = parts.next().unwrap_or_default().to_string();
                cfg.insert(key, val);
            }
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("tensor without name".into()))?;
                let dims = parse_dims(parts.next().unwrap_or_default())?;
                let body = lines
                    .next()
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {name} has no data")))?;
                let data = body.split_whitespace().map(unhex).collect::<Result<Vec<_>>>()?;
                let t = Tensor::new(dims, data)
                    .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
                params.insert(name.to_string(), t);
            }
            Some("end") => {
                ended = true;
                break;
            }
            None => {}
            Some(other) => return Err(Error::Checkpoint(format!("unexpected record {other:?}"))),
        }
    }
    if !ended {
        return Err(Error::Checkpoint("truncated checkpoint (no end marker)".into()));
    }
    let get = |k: &str| {
        cfg.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing config {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad config {k}")))
    };
    let config = EncoderConfig {
        input_size: num("input_size")?,
        scale_factor: unhex(&get("scale_factor")?)?,
        channel_widths: fixed(&get("channel_widths")?)?,
        fc_widths: fixed(&get("fc_widths")?)?,
        feature_dim: num("feature_dim")?,
        target_hidden: num("target_hidden")?,
    };
    ModelState::from_parts(config, params)
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&text)
}
