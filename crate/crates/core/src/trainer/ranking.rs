//! Ranking-model training with mixed source/target batches and early
//! stopping on source pair accuracy.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Tensor};
use crate::encoder::{
    classify_rank, encode_batch, rank_feature, rank_probability, regress_source, Bindings,
    EncoderConfig, Mode, ModelState, Trainable, CENTER0, CENTER1,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{total_loss, CorrNorm, LossBreakdown, LossInputs, LossWeights};
use crate::pairing::Pair;

use super::optim::{adam_step, AdamConfig, AdamState};
use super::TrainConfig;

/// Images resized to the encoder input and flattened to `3·S·S` values.
#[derive(Debug, Clone)]
pub struct PreparedImages {
    size: usize,
    data: Vec<Vec<f64>>,
}

impl PreparedImages {
    pub fn new(images: &[Image], size: usize) -> Result<Self> {
        let data = images
            .iter()
            .map(|img| {
                img.validate_rgb()?;
                Ok(img.resize(size, size)?.data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { size, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i]
    }
}

fn pack(rows: &[&[f64]], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * 3 * size * size);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), 3, size, size], data)
}

/// Thread pool for evaluation passes, sized by `RANKUDA_THREADS` when set.
pub(crate) fn eval_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("RANKUDA_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("RANKUDA_THREADS={v:?} is not a count")))?;
        b = b.num_threads(n.max(1));
    }
    b.build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Eval-mode features `[N, d]`. Each image uses its own graph, so the
/// result does not depend on the thread count.
pub fn encode_prepared(state: &ModelState, images: &PreparedImages) -> Result<Tensor> {
    if images.size != state.config().input_size {
        return Err(Error::InvalidInput(format!(
            "images prepared at {} px for a {} px encoder",
            images.size,
            state.config().input_size
        )));
    }
    let rows: Vec<Vec<f64>> = eval_pool()?.install(|| {
        (0..images.len())
            .into_par_iter()
            .map(|i| {
                let mut g = Graph::new();
                let mut b = Bindings::new(Trainable::None);
                let x = g.leaf(&pack(&[images.row(i)], images.size)?);
                let enc = encode_batch(&mut g, &mut b, state, x, Mode::Eval)?;
                Ok(g.value(enc.features).to_vec())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Tensor::new(vec![images.len(), state.feature_dim()], rows.concat())
}

/// Labelled source pairs over normalized scores.
#[derive(Debug, Clone, Copy)]
pub struct SourceSet<'a> {
    pub images: &'a PreparedImages,
    pub scores: &'a [f64],
    pub pairs: &'a [Pair],
}

/// Unlabelled target pairs.
#[derive(Debug, Clone, Copy)]
pub struct TargetSet<'a> {
    pub images: &'a PreparedImages,
    pub pairs: &'a [Pair],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub source_accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_accuracy: f64,
}

impl TrainLog {
    pub const EPOCH_HEADER: &'static str = "epoch,source_accuracy,mean_loss";

    pub fn steps_csv(&self) -> String {
        let mut s = format!("{}\n", LossBreakdown::CSV_HEADER);
        for (i, b) in self.steps.iter().enumerate() {
            s.push_str(&b.csv_row(i + 1));
            s.push('\n');
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = format!("{}\n", Self::EPOCH_HEADER);
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.source_accuracy, e.mean_loss));
        }
        s
    }

    /// Rebuild a log from the two CSV files written by [`Self::steps_csv`]
    /// and [`Self::epochs_csv`].
    pub fn read(steps_path: &Path, epochs_path: &Path) -> Result<Self> {
        let mut log = TrainLog::default();
        let mut r = csv::Reader::from_path(steps_path)?;
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| Error::Parse {
                    path: steps_path.to_path_buf(),
                    msg: format!("bad number {:?}", &rec[i]),
                })
            };
            log.steps.push(LossBreakdown {
                pre: f(1)?,
                mmd: f(2)?,
                center: f(3)?,
                rec: f(4)?,
                cor: f(5)?,
                mse: f(6)?,
                total: f(7)?,
            });
        }
        let mut r = csv::Reader::from_path(epochs_path)?;
        for rec in r.records() {
            let rec = rec?;
            let bad = |i: usize| Error::Parse {
                path: epochs_path.to_path_buf(),
                msg: format!("bad field {:?}", &rec[i]),
            };
            let e = EpochRecord {
                epoch: rec[0].parse().map_err(|_| bad(0))?,
                source_accuracy: rec[1].parse().map_err(|_| bad(1))?,
                mean_loss: rec[2].parse().map_err(|_| bad(2))?,
            };
            if e.source_accuracy > log.best_accuracy || log.best_epoch == 0 {
                log.best_accuracy = e.source_accuracy;
                log.best_epoch = e.epoch;
            }
            log.epochs.push(e);
        }
        Ok(log)
    }
}

pub(crate) fn adam_config(cfg: &TrainConfig, learning_rate: f64) -> AdamConfig {
    AdamConfig {
        learning_rate,
        weight_decay: cfg.weight_decay,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    }
}

/// Fraction of pairs whose predicted order (P > 0.5 means first is better)
/// matches the label.
pub fn source_accuracy(state: &ModelState, source: &SourceSet) -> Result<f64> {
    if source.pairs.is_empty() {
        return Err(Error::InvalidInput("no source pairs to score".into()));
    }
    let feats = encode_prepared(state, source.images)?;
    let mut correct = 0usize;
    for p in source.pairs {
        let label = p
            .label
            .ok_or_else(|| Error::InvalidInput("source pair without a label".into()))?;
        let diff: Vec<f64> = feats
            .row(p.first)
            .iter()
            .zip(feats.row(p.second))
            .map(|(a, b)| a - b)
            .collect();
        let predicted = u8::from(rank_probability(state, &diff)? > 0.5);
        correct += usize::from(predicted == label);
    }
    Ok(correct as f64 / source.pairs.len() as f64)
}

struct Batch<'a> {
    source: &'a [Pair],
    target: &'a [Pair],
}

fn ranking_step(
    state: &mut ModelState,
    opt: &mut AdamState,
    batch: &Batch,
    src: &SourceSet,
    tgt: &TargetSet,
    weights: &LossWeights,
    corr_norm: CorrNorm,
    adam: &AdamConfig,
) -> Result<LossBreakdown> {
    // one input row per distinct image in the batch
    let mut order: Vec<(bool, usize)> = Vec::new();
    let mut seen: HashMap<(bool, usize), usize> = HashMap::new();
    let mut row_of = |key: (bool, usize)| -> usize {
        *seen.entry(key).or_insert_with(|| {
            order.push(key);
            order.len() - 1
        })
    };
    let sa: Vec<usize> = batch.source.iter().map(|p| row_of((false, p.first))).collect();
    let sb: Vec<usize> = batch.source.iter().map(|p| row_of((false, p.second))).collect();
    let ta: Vec<usize> = batch.target.iter().map(|p| row_of((true, p.first))).collect();
    let tb: Vec<usize> = batch.target.iter().map(|p| row_of((true, p.second))).collect();
    let rows: Vec<&[f64]> = order
        .iter()
        .map(|&(is_target, i)| if is_target { tgt.images.row(i) } else { src.images.row(i) })
        .collect();

    let mut g = Graph::new();
    let mut b = Bindings::new(Trainable::Ranking);
    let x = g.leaf(&pack(&rows, src.images.size)?);
    let enc = encode_batch(&mut g, &mut b, state, x, Mode::Train)?;
    let f = enc.features;

    let fa = g.gather_rows(f, &sa)?;
    let fb = g.gather_rows(f, &sb)?;
    let source_rank = rank_feature(&mut g, fa, fb)?;
    let source_prob = classify_rank(&mut g, &mut b, state, source_rank)?;
    let labels: Vec<f64> = batch
        .source
        .iter()
        .map(|p| p.label.map(f64::from).ok_or_else(|| Error::InvalidInput("source pair without a label".into())))
        .collect::<Result<_>>()?;

    let (target_rank, target_prob) = if batch.target.is_empty() {
        (None, None)
    } else {
        let ga = g.gather_rows(f, &ta)?;
        let gb = g.gather_rows(f, &tb)?;
        let tr = rank_feature(&mut g, ga, gb)?;
        let tp = classify_rank(&mut g, &mut b, state, tr)?;
        (Some(tr), Some(tp))
    };

    let both: Vec<usize> = sa.iter().chain(&sb).copied().collect();
    let fs = g.gather_rows(f, &both)?;
    let source_pred = regress_source(&mut g, &mut b, state, fs)?;
    let source_truth: Vec<f64> = batch
        .source
        .iter()
        .map(|p| src.scores[p.first])
        .chain(batch.source.iter().map(|p| src.scores[p.second]))
        .collect();

    let center0 = b.var(&mut g, state, CENTER0)?;
    let center1 = b.var(&mut g, state, CENTER1)?;
    let inputs = LossInputs {
        source_rank,
        source_prob,
        labels,
        target_rank,
        target_prob,
        source_pred,
        source_truth,
        center0,
        center1,
        mmd_bandwidth: None,
    };
    let (loss, breakdown) = total_loss(&mut g, &inputs, weights, corr_norm)?;
    let grads = g.backward(loss)?;
    let collected = b.collect(&grads, state);
    adam_step(state, opt, &collected, adam)?;
    state.apply_bn_updates(&enc.bn_updates)?;
    Ok(breakdown)
}

/// Train a freshly initialized ranking model. Returns the parameters of
/// the epoch with the best source accuracy.
pub fn train_ranking(
    source: &SourceSet,
    target: &TargetSet,
    cfg: &TrainConfig,
    init_seed: u64,
    shuffle_seed: u64,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    let state = ModelState::init(cfg.encoder_config(), init_seed)?;
    train_ranking_from(state, source, target, cfg, shuffle_seed)
}

/// Source-only pre-training with the ranking and source-MSE terms, used as
/// the shared starting encoder of every pipeline iteration. Runs exactly
/// `cfg.warmup_epochs` epochs and keeps the best by source accuracy.
pub fn warmup_encoder(
    source: &SourceSet,
    cfg: &TrainConfig,
    init_seed: u64,
    shuffle_seed: u64,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    let mut weights = LossWeights::zero();
    weights.mse = LossWeights::default().mse;
    let warm = TrainConfig {
        weights,
        rank_max_epochs: cfg.warmup_epochs.max(1),
        patience: cfg.warmup_epochs.max(1),
        ..cfg.clone()
    };
    let no_target = TargetSet {
        images: source.images,
        pairs: &[],
    };
    let state = ModelState::init(cfg.encoder_config(), init_seed)?;
    train_ranking_from(state, source, &no_target, &warm, shuffle_seed)
}

/// As [`train_ranking`], starting from the given parameters.
pub fn train_ranking_from(
    mut state: ModelState,
    source: &SourceSet,
    target: &TargetSet,
    cfg: &TrainConfig,
    shuffle_seed: u64,
) -> Result<(ModelState, TrainLog)> {
    let w = cfg.weights;
    check_encoder(state.config(), source.images)?;
    if source.scores.len() != source.images.len() {
        return Err(Error::InvalidInput(format!(
            "{} source scores for {} images",
            source.scores.len(),
            source.images.len()
        )));
    }
    if source.pairs.is_empty() {
        return Err(Error::InvalidInput("no source pairs to train on".into()));
    }
    let uses_target = w.mmd > 0.0 || w.rec > 0.0;
    if uses_target && target.pairs.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "MMD / rectification weights are nonzero but only {} target pairs were selected",
            target.pairs.len()
        )));
    }
    let adam = adam_config(cfg, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut opt = AdamState::new();
    let mut log = TrainLog::default();
    let mut best: Option<ModelState> = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut stale = 0usize;

    let bs = cfg.source_pairs_per_batch;
    let bt = cfg.target_pairs_per_batch.min(target.pairs.len());
    let mut src_order: Vec<usize> = (0..source.pairs.len()).collect();
    let mut tgt_order: Vec<usize> = (0..target.pairs.len()).collect();
    let mut tgt_cursor = tgt_order.len();

    for epoch in 1..=cfg.rank_max_epochs {
        src_order.shuffle(&mut rng);
        let steps = (source.pairs.len() / bs).max(1);
        let mut loss_sum = 0.0;
        for s in 0..steps {
            let sel: Vec<Pair> = src_order[s * bs..((s + 1) * bs).min(src_order.len())]
                .iter()
                .map(|&i| source.pairs[i])
                .collect();
            let mut tsel = Vec::new();
            if uses_target {
                while tsel.len() < bt {
                    if tgt_cursor == tgt_order.len() {
                        tgt_order.shuffle(&mut rng);
                        tgt_cursor = 0;
                    }
                    tsel.push(target.pairs[tgt_order[tgt_cursor]]);
                    tgt_cursor += 1;
                }
            }
            let batch = Batch {
                source: &sel,
                target: &tsel,
            };
            let b = ranking_step(&mut state, &mut opt, &batch, source, target, &w, cfg.corr_norm, &adam)?;
            loss_sum += b.total;
            log.steps.push(b);
        }
        let acc = source_accuracy(&state, source)?;
        log.epochs.push(EpochRecord {
            epoch,
            source_accuracy: acc,
            mean_loss: loss_sum / steps as f64,
        });
        log::info!("epoch {epoch}: source accuracy {acc:.4}, mean loss {:.5}", loss_sum / steps as f64);
        if acc > best_acc {
            best_acc = acc;
            best = Some(state.clone());
            log.best_epoch = epoch;
            log.best_accuracy = acc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.expect("at least one epoch runs"), log))
}

fn check_encoder(config: &EncoderConfig, images: &PreparedImages) -> Result<()> {
    if config.input_size != images.size {
        return Err(Error::InvalidInput(format!(
            "images prepared at {} px for a {} px encoder",
            images.size, config.input_size
        )));
    }
    Ok(())
}
