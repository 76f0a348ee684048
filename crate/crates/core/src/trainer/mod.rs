//! Optimization, early stopping, tournament aggregation, target regression
//! and the iterative retraining pipeline.

mod aggregate;
mod config;
mod optim;
mod ranking;
mod regression;

pub use aggregate::{aggregate_quality, tournament_scores};
pub use config::TrainConfig;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use ranking::{
    encode_prepared, source_accuracy, train_ranking, train_ranking_from, warmup_encoder,
    EpochRecord, PreparedImages, SourceSet, TargetSet, TrainLog,
};
pub use regression::{train_regression, RegressionLog};

use std::path::{Path, PathBuf};

use log::info;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{read_scores_for, write_scores, Manifest};
use crate::encoder::{predict_target, ModelState};
use crate::error::{Error, Result};
use crate::image::{Image, PnmLoader};
use crate::pairing::{
    minmax_normalize, select_source_pairs, select_target_pairs, Pair, ScoreKind, ScoreManifest,
};

/// Random streams used by the pipeline. Each stage draws from its own
/// generator so that resuming from a checkpoint replays identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    SourcePairs = 1,
    TargetPairs = 2,
    Init = 3,
    Shuffle = 4,
    Aggregate = 5,
    Regression = 6,
}

/// Seed of one stage stream, mixed with SplitMix64.
pub fn stage_seed(master: u64, iteration: usize, stage: Stage) -> u64 {
    let mut z = master
        ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (stage as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Inputs of a full run.
#[derive(Debug, Clone)]
pub struct PipelineData {
    pub source_ids: Vec<String>,
    pub source_images: Vec<Image>,
    /// Raw ground-truth scores, normalized internally.
    pub source_scores: Vec<f64>,
    pub target_ids: Vec<String>,
    pub target_images: Vec<Image>,
    /// External pseudo-scores for the target images (raw).
    pub pseudo: ScoreManifest,
}

impl PipelineData {
    /// Load a source manifest with scores, a target manifest and the
    /// target pseudo-score manifest.
    pub fn from_manifests(source: &Path, target: &Path, pseudo: &Path) -> Result<Self> {
        let src = Manifest::read(source)?;
        let tgt = Manifest::read(target)?;
        let target_ids = tgt.ids();
        let pseudo_scores = read_scores_for(pseudo, &target_ids)?;
        Ok(Self {
            source_ids: src.ids(),
            source_images: src.load_images(&PnmLoader)?,
            source_scores: src.scores(ScoreKind::GroundTruth)?.scores().to_vec(),
            target_images: tgt.load_images(&PnmLoader)?,
            pseudo: ScoreManifest::new(
                target_ids.iter().cloned().zip(pseudo_scores).collect(),
                ScoreKind::Pseudo,
            )?,
            target_ids,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationResult {
    pub iteration: usize,
    pub source_pairs: usize,
    pub target_pairs: usize,
    pub rank_log: TrainLog,
    pub aggregated: Vec<f64>,
    pub regression: RegressionLog,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub iterations: Vec<IterationResult>,
    pub state: ModelState,
    pub predictions: Vec<f64>,
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_state_atomic(path: &Path, state: &ModelState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    save_checkpoint(&tmp, state)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_scores_atomic(path: &Path, ids: &[String], scores: &[f64]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_scores(&tmp, ids, scores)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_regression_log(path: &Path) -> Result<RegressionLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut log = RegressionLog::default();
    for line in text.lines().skip(1) {
        let mut it = line.split(',');
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            msg: format!("bad line {line:?}"),
        };
        let epoch: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let loss: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if epoch == 0 {
            log.best_loss = loss;
        } else {
            log.epoch_losses.push(loss);
            if loss < log.best_loss {
                log.best_loss = loss;
                log.best_epoch = epoch;
            }
        }
    }
    Ok(log)
}

fn regression_log_csv(log: &RegressionLog, initial: f64) -> String {
    let mut s = format!("epoch,loss\n0,{initial}\n");
    for (i, l) in log.epoch_losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

/// Paths of one iteration's outputs.
struct IterPaths {
    dir: PathBuf,
}

impl IterPaths {
    fn rank(&self) -> PathBuf {
        self.dir.join("rank.ckpt")
    }
    fn rank_steps(&self) -> PathBuf {
        self.dir.join("rank_steps.csv")
    }
    fn rank_epochs(&self) -> PathBuf {
        self.dir.join("rank_epochs.csv")
    }
    fn pseudo(&self) -> PathBuf {
        self.dir.join("pseudo.csv")
    }
    fn reg(&self) -> PathBuf {
        self.dir.join("reg.ckpt")
    }
    fn reg_log(&self) -> PathBuf {
        self.dir.join("reg_log.csv")
    }
    fn predictions(&self) -> PathBuf {
        self.dir.join("predictions.csv")
    }
}

fn cap_pairs(mut pairs: Vec<Pair>, cap: usize, seed: u64) -> Vec<Pair> {
    if cap > 0 && pairs.len() > cap {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, pairs.len(), cap).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|i| pairs[i]).collect();
    }
    pairs
}

/// Run `cfg.pipeline_iterations` rank → aggregate → regress cycles. When
/// `out` is given, every stage output is written under `out/iter{k}/` and
/// reused on a later call, so an interrupted run resumes where it stopped.
pub fn run_pipeline(data: &PipelineData, cfg: &TrainConfig, out: Option<&Path>) -> Result<PipelineResult> {
    cfg.validate()?;
    let size = cfg.input_size;
    if data.source_ids.len() != data.source_images.len()
        || data.source_ids.len() != data.source_scores.len()
    {
        return Err(Error::InvalidInput("source ids, images and scores differ in length".into()));
    }
    if data.target_ids.len() != data.target_images.len() {
        return Err(Error::InvalidInput("target ids and images differ in length".into()));
    }
    let src_prepared = PreparedImages::new(&data.source_images, size)
        .map_err(|e| Error::stage("prepare", e))?;
    let tgt_prepared = PreparedImages::new(&data.target_images, size)
        .map_err(|e| Error::stage("prepare", e))?;
    let tgt_gray: Vec<_> = data.target_images.iter().map(Image::to_gray).collect();

    let source_norm = ScoreManifest::new(
        data.source_ids.iter().cloned().zip(data.source_scores.iter().copied()).collect(),
        ScoreKind::GroundTruth,
    )
    .and_then(|m| m.normalized())
    .map_err(|e| Error::stage("source_pairs", e))?;
    let source_pairs = select_source_pairs(&source_norm, &cfg.pair_config(0))
        .map(|p| cap_pairs(p, cfg.max_source_pairs, stage_seed(cfg.seed, 0, Stage::SourcePairs)))
        .map_err(|e| Error::stage("source_pairs", e))?;
    info!("{} source pairs", source_pairs.len());
    let source = SourceSet {
        images: &src_prepared,
        scores: source_norm.scores(),
        pairs: &source_pairs,
    };

    // shared pre-trained encoder, iteration 0 of the seed streams
    let warm = if cfg.warmup_epochs > 0 {
        let path = out.map(|o| o.join("warmup.ckpt"));
        Some(match path.as_ref().filter(|p| p.exists()) {
            Some(p) => load_checkpoint(p).map_err(|e| Error::stage("warmup", e))?,
            None => {
                let (s, l) = warmup_encoder(
                    &source,
                    cfg,
                    stage_seed(cfg.seed, 0, Stage::Init),
                    stage_seed(cfg.seed, 0, Stage::Shuffle),
                )
                .map_err(|e| Error::stage("warmup", e))?;
                info!("warm-up: best source accuracy {:.4}", l.best_accuracy);
                if let Some(p) = &path {
                    save_state_atomic(p, &s)?;
                }
                s
            }
        })
    } else {
        None
    };

    let mut pseudo = data.pseudo.normalized().map_err(|e| Error::stage("target_pairs", e))?;
    let mut iterations = Vec::new();
    let mut final_state = None;
    for k in 1..=cfg.pipeline_iterations {
        let paths = out.map(|o| IterPaths {
            dir: o.join(format!("iter{k}")),
        });
        if let Some(p) = &paths {
            std::fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
        }
        let stage = |name: &str| format!("iter{k}/{name}");

        let target_pairs = select_target_pairs(&pseudo, &data.target_ids, &tgt_gray, &cfg.pair_config(0))
            .map(|p| cap_pairs(p, cfg.max_target_pairs, stage_seed(cfg.seed, k, Stage::TargetPairs)))
            .map_err(|e| Error::stage(stage("target_pairs"), e))?;
        info!("iteration {k}: {} target pairs", target_pairs.len());
        let target = TargetSet {
            images: &tgt_prepared,
            pairs: &target_pairs,
        };

        // ranking
        let resumed = paths
            .as_ref()
            .filter(|p| p.rank().exists() && p.rank_steps().exists() && p.rank_epochs().exists());
        let (rank_state, rank_log) = match resumed {
            Some(p) => {
                info!("iteration {k}: resuming ranking model from {}", p.rank().display());
                let s = load_checkpoint(&p.rank()).map_err(|e| Error::stage(stage("rank"), e))?;
                let l = TrainLog::read(&p.rank_steps(), &p.rank_epochs())
                    .map_err(|e| Error::stage(stage("rank"), e))?;
                (s, l)
            }
            None => {
                let trained = match &warm {
                    Some(w) => train_ranking_from(
                        w.clone(),
                        &source,
                        &target,
                        cfg,
                        stage_seed(cfg.seed, k, Stage::Shuffle),
                    ),
                    None => train_ranking(
                        &source,
                        &target,
                        cfg,
                        stage_seed(cfg.seed, k, Stage::Init),
                        stage_seed(cfg.seed, k, Stage::Shuffle),
                    ),
                };
                let (s, l) = trained.map_err(|e| Error::stage(stage("rank"), e))?;
                if let Some(p) = &paths {
                    write_atomic(&p.rank_steps(), &l.steps_csv())?;
                    write_atomic(&p.rank_epochs(), &l.epochs_csv())?;
                    save_state_atomic(&p.rank(), &s)?;
                }
                (s, l)
            }
        };

        // aggregation
        let features = encode_prepared(&rank_state, &tgt_prepared)
            .map_err(|e| Error::stage(stage("aggregate"), e))?;
        let aggregated = match paths.as_ref().filter(|p| p.pseudo().exists()) {
            Some(p) => read_scores_for(&p.pseudo(), &data.target_ids)
                .map_err(|e| Error::stage(stage("aggregate"), e))?,
            None => {
                let sample = (cfg.aggregate_sample > 0)
                    .then(|| (cfg.aggregate_sample, stage_seed(cfg.seed, k, Stage::Aggregate)));
                let s = aggregate_quality(&rank_state, &features, sample)
                    .map_err(|e| Error::stage(stage("aggregate"), e))?;
                if let Some(p) = &paths {
                    write_scores_atomic(&p.pseudo(), &data.target_ids, &s)?;
                }
                s
            }
        };

        // regression
        let resumed = paths
            .as_ref()
            .filter(|p| p.reg().exists() && p.reg_log().exists());
        let (reg_state, reg_log) = match resumed {
            Some(p) => {
                let s = load_checkpoint(&p.reg()).map_err(|e| Error::stage(stage("regress"), e))?;
                let l = read_regression_log(&p.reg_log()).map_err(|e| Error::stage(stage("regress"), e))?;
                (s, l)
            }
            None => {
                let initial = predict_target(&rank_state, &features)?
                    .iter()
                    .zip(&aggregated)
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>()
                    / aggregated.len() as f64;
                let (s, l) = train_regression(
                    &features,
                    &aggregated,
                    &rank_state,
                    cfg,
                    stage_seed(cfg.seed, k, Stage::Regression),
                )
                .map_err(|e| Error::stage(stage("regress"), e))?;
                if let Some(p) = &paths {
                    write_atomic(&p.reg_log(), &regression_log_csv(&l, initial))?;
                    save_state_atomic(&p.reg(), &s)?;
                }
                (s, l)
            }
        };
        let predictions = predict_target(&reg_state, &features)
            .map_err(|e| Error::stage(stage("predict"), e))?;
        if let Some(p) = &paths {
            write_scores_atomic(&p.predictions(), &data.target_ids, &predictions)?;
        }

        iterations.push(IterationResult {
            iteration: k,
            source_pairs: source_pairs.len(),
            target_pairs: target_pairs.len(),
            rank_log,
            aggregated,
            regression: reg_log,
            predictions: predictions.clone(),
        });
        final_state = Some(reg_state);

        if k < cfg.pipeline_iterations {
            let refined = minmax_normalize(&predictions).map_err(|e| Error::stage(stage("refine"), e))?;
            pseudo = ScoreManifest::new(
                data.target_ids.iter().cloned().zip(refined).collect(),
                ScoreKind::Pseudo,
            )?;
        }
    }

    let result = PipelineResult {
        predictions: iterations.last().map(|r| r.predictions.clone()).unwrap_or_default(),
        state: final_state.expect("at least one iteration"),
        iterations,
    };
    if let Some(o) = out {
        write_scores_atomic(&o.join("predictions.csv"), &data.target_ids, &result.predictions)?;
        let mut log = String::from("iteration,step,L_pre,L_mmd,L_ct,L_rec,L_cor,L_mse,total\n");
        for it in &result.iterations {
            for (i, b) in it.rank_log.steps.iter().enumerate() {
                log.push_str(&format!("{},{}\n", it.iteration, b.csv_row(i + 1)));
            }
        }
        write_atomic(&o.join("log.csv"), &log)?;
    }
    Ok(result)
}

/// Target-head scores of `images` under a trained model.
pub fn predict_images(state: &ModelState, images: &[Image]) -> Result<Vec<f64>> {
    let prepared = PreparedImages::new(images, state.config().input_size)?;
    let features = encode_prepared(state, &prepared)?;
    predict_target(state, &features)
}
