//! `image_id,score` manifests. Image ids are file paths relative to the
//! manifest's directory; scores may be left empty for unlabelled images.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Image, ImageLoader};
use crate::pairing::{ScoreKind, ScoreManifest};

pub const MANIFEST_HEADER: [&str; 2] = ["image_id", "score"];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.iter().ne(MANIFEST_HEADER) {
            return Err(parse_err(
                path,
                format!("expected header {}", MANIFEST_HEADER.join(",")),
            ));
        }
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(parse_err(path, format!("expected 2 fields, got {}", rec.len())));
            }
            let id = rec[0].to_string();
            if id.is_empty() {
                return Err(parse_err(path, "empty image id"));
            }
            if !seen.insert(id.clone()) {
                return Err(parse_err(path, format!("duplicate image id {id}")));
            }
            let score = match rec[1].trim() {
                "" => None,
                s => {
                    let v: f64 = s
                        .parse()
                        .map_err(|_| parse_err(path, format!("bad score {s:?} for {id}")))?;
                    if !v.is_finite() {
                        return Err(parse_err(path, format!("non-finite score for {id}")));
                    }
                    Some(v)
                }
            };
            entries.push(ManifestEntry { id, score });
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scores of every entry; errors when any is missing.
    pub fn scores(&self, kind: ScoreKind) -> Result<ScoreManifest> {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                e.score
                    .map(|s| (e.id.clone(), s))
                    .ok_or_else(|| Error::InvalidInput(format!("no score for {}", e.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        ScoreManifest::new(entries, kind)
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn load_images(&self, loader: &dyn ImageLoader) -> Result<Vec<Image>> {
        self.entries
            .iter()
            .map(|e| loader.load(&self.image_path(&e.id)))
            .collect()
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".rankuda.lock";

    /// Create `dir` if needed and take its lock file.
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Write an `image_id,score` file; `None` scores are left empty.
pub fn write_manifest(path: &Path, ids: &[String], scores: &[Option<f64>]) -> Result<()> {
    if ids.len() != scores.len() {
        return Err(Error::InvalidInput(format!(
            "{} ids for {} scores",
            ids.len(),
            scores.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for (id, s) in ids.iter().zip(scores) {
        let s = s.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([id.as_str(), s.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_scores(path: &Path, ids: &[String], scores: &[f64]) -> Result<()> {
    let s: Vec<Option<f64>> = scores.iter().copied().map(Some).collect();
    write_manifest(path, ids, &s)
}

/// Scores aligned to `ids`, read from a manifest that must contain each id.
pub fn read_scores_for(path: &Path, ids: &[String]) -> Result<Vec<f64>> {
    let m = Manifest::read(path)?.scores(ScoreKind::Pseudo)?;
    ids.iter()
        .map(|id| {
            m.get(id)
                .ok_or_else(|| parse_err(path, format!("missing score for {id}")))
        })
        .collect()
}
