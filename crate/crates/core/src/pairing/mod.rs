//! Score normalization and discriminable pair selection for both domains.

mod ssim;

pub use ssim::{ssim, SsimPrepared, C1, C2, WINDOW, WINDOW_SIGMA};

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Where a set of scores comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreManifest {
    ids: Vec<String>,
    scores: Vec<f64>,
    kind: ScoreKind,
    index: HashMap<String, usize>,
}

impl ScoreManifest {
    pub fn new(entries: Vec<(String, f64)>, kind: ScoreKind) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut scores = Vec::with_capacity(entries.len());
        for (i, (id, s)) in entries.into_iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("score of {id}")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate image id {id}")));
            }
            ids.push(id);
            scores.push(s);
        }
        Ok(Self {
            ids,
            scores,
            kind,
            index,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.index.get(id).map(|&i| self.scores[i])
    }

    pub fn normalized(&self) -> Result<Self> {
        let scores = minmax_normalize(&self.scores)?;
        Self::new(self.ids.iter().cloned().zip(scores).collect(), self.kind)
    }
}

/// `(s − min) / (max − min)`.
pub fn minmax_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Degenerate(
            "min-max normalization needs at least two distinct scores".into(),
        ));
    }
    Ok(scores.iter().map(|s| (s - lo) / (hi - lo)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSelectionConfig {
    pub tau_source: f64,
    pub tau_target: f64,
    pub ssim_threshold: f64,
    pub max_pairs: Option<usize>,
    pub seed: u64,
}

impl Default for PairSelectionConfig {
    fn default() -> Self {
        Self {
            tau_source: 0.07,
            tau_target: 0.6,
            ssim_threshold: 0.75,
            max_pairs: None,
            seed: 0,
        }
    }
}

impl PairSelectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_source", self.tau_source),
            ("tau_target", self.tau_target),
            ("ssim_threshold", self.ssim_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Ordered pair of indices into an image list. `label` is 1 when the first
/// image has the higher quality, 0 when lower, and absent for target pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pair {
    pub first: usize,
    pub second: usize,
    pub label: Option<u8>,
}

impl Pair {
    pub fn reversed(self) -> Self {
        Self {
            first: self.second,
            second: self.first,
            label: self.label.map(|y| 1 - y),
        }
    }
}

fn cap(pairs: Vec<Pair>, cfg: &PairSelectionConfig) -> Vec<Pair> {
    match cfg.max_pairs {
        Some(m) if pairs.len() > m => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut keep = rand::seq::index::sample(&mut rng, pairs.len(), m).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| pairs[i]).collect()
        }
        _ => pairs,
    }
}

/// All pairs whose normalized scores differ by more than `tau_source`, in
/// both orders, labelled by which image scores higher.
pub fn select_source_pairs(manifest: &ScoreManifest, cfg: &PairSelectionConfig) -> Result<Vec<Pair>> {
    cfg.validate()?;
    if manifest.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "source pair selection needs at least 2 images, got {}",
            manifest.len()
        )));
    }
    let s = manifest.scores();
    let mut pairs = Vec::new();
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            if (s[i] - s[j]).abs() > cfg.tau_source {
                let p = Pair {
                    first: i,
                    second: j,
                    label: Some(u8::from(s[i] > s[j])),
                };
                pairs.push(p);
                pairs.push(p.reversed());
            }
        }
    }
    Ok(cap(pairs, cfg))
}

/// Unlabelled target pairs: pseudo-score gap above `tau_target`, or SSIM
/// above `ssim_threshold` regardless of gap. `ids` and `images` are aligned;
/// scores are looked up by id in `pseudo`.
pub fn select_target_pairs(
    pseudo: &ScoreManifest,
    ids: &[String],
    images: &[GrayImage],
    cfg: &PairSelectionConfig,
) -> Result<Vec<Pair>> {
    cfg.validate()?;
    if ids.len() != images.len() {
        return Err(Error::InvalidInput(format!(
            "{} ids for {} images",
            ids.len(),
            images.len()
        )));
    }
    let scores = ids
        .iter()
        .map(|id| {
            pseudo
                .get(id)
                .ok_or_else(|| Error::InvalidInput(format!("missing pseudo score for {id}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let prepared = images
        .iter()
        .map(SsimPrepared::new)
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let keep = (scores[i] - scores[j]).abs() > cfg.tau_target
                || prepared[i].ssim(&prepared[j])? > cfg.ssim_threshold;
            if keep {
                let p = Pair {
                    first: i,
                    second: j,
                    label: None,
                };
                pairs.push(p);
                pairs.push(p.reversed());
            }
        }
    }
    Ok(cap(pairs, cfg))
}

pub const PAIRS_HEADER: [&str; 3] = ["first_id", "second_id", "label"];

pub fn write_pairs_csv(path: &Path, pairs: &[Pair], ids: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PAIRS_HEADER)?;
    for p in pairs {
        let label = p.label.map(|y| y.to_string()).unwrap_or_default();
        w.write_record([ids[p.first].as_str(), ids[p.second].as_str(), label.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs_csv(path: &Path, ids: &[String]) -> Result<Vec<Pair>> {
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(PAIRS_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: format!("expected header {}", PAIRS_HEADER.join(",")),
        });
    }
    let lookup = |id: &str| {
        index.get(id).copied().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("unknown image id {id}"),
        })
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let label = match &rec[2] {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    msg: format!("bad label {other:?}"),
                })
            }
        };
        out.push(Pair {
            first: lookup(&rec[0])?,
            second: lookup(&rec[1])?,
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(scores: &[f64]) -> ScoreManifest {
        ScoreManifest::new(
            scores
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("img{i}"), *s))
                .collect(),
            ScoreKind::GroundTruth,
        )
        .unwrap()
    }

    #[test]
    fn normalization() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        let x = [0.0, 0.3, 1.0, 0.7];
        assert_eq!(minmax_normalize(&x).unwrap(), x.to_vec());
        assert!(matches!(minmax_normalize(&[3.0, 3.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn source_threshold_enumeration() {
        let m = manifest(&[0.0, 0.05, 1.0]);
        let pairs = select_source_pairs(&m, &PairSelectionConfig::default()).unwrap();
        let got: Vec<_> = pairs.iter().map(|p| (p.first, p.second, p.label.unwrap())).collect();
        assert_eq!(got, vec![(0, 2, 0), (2, 0, 1), (1, 2, 0), (2, 1, 1)]);
        let cfg = PairSelectionConfig {
            tau_source: 1.0,
            ..Default::default()
        };
        assert!(select_source_pairs(&m, &cfg).unwrap().is_empty());
        assert!(select_source_pairs(&manifest(&[0.5]), &cfg).is_err());
    }

    #[test]
    fn cap_is_deterministic_subset() {
        let m = manifest(&(0..20).map(|i| i as f64 / 19.0).collect::<Vec<_>>());
        let cfg = PairSelectionConfig {
            max_pairs: Some(25),
            seed: 5,
            ..Default::default()
        };
        let a = select_source_pairs(&m, &cfg).unwrap();
        let b = select_source_pairs(&m, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 25);
        let all = select_source_pairs(&m, &PairSelectionConfig::default()).unwrap();
        assert!(a.iter().all(|p| all.contains(p)));
    }

    #[test]
    fn target_rules() {
        let ids: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let pseudo = ScoreManifest::new(
            vec![("t0".into(), 0.1), ("t1".into(), 0.3), ("t2".into(), 0.5)],
            ScoreKind::Pseudo,
        )
        .unwrap();
        let rng_img = |k: usize| {
            GrayImage::new(
                12,
                12,
                (0..144).map(|p| ((p * 7 + k * 13) % 17) as f64 / 17.0).collect(),
            )
            .unwrap()
        };
        let a = rng_img(0);
        let imgs = vec![a.clone(), rng_img(5), a];
        let pairs = select_target_pairs(&pseudo, &ids, &imgs, &PairSelectionConfig::default()).unwrap();
        let got: Vec<_> = pairs.iter().map(|p| (p.first, p.second)).collect();
        assert_eq!(got, vec![(0, 2), (2, 0)]);
        assert!(pairs.iter().all(|p| p.label.is_none()));

        let missing = vec!["t0".to_string(), "zz".to_string(), "t2".to_string()];
        let err = select_target_pairs(&pseudo, &missing, &imgs, &PairSelectionConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn pairs_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let pairs = vec![
            Pair { first: 0, second: 2, label: Some(1) },
            Pair { first: 2, second: 1, label: None },
        ];
        write_pairs_csv(&path, &pairs, &ids).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "first_id,second_id,label\na,c,1\nc,b,\n");
        assert_eq!(read_pairs_csv(&path, &ids).unwrap(), pairs);
    }
}
