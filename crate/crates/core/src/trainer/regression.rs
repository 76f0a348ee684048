//! Target-head regression on frozen encoder features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::encoder::{predict_target, regress_target, Bindings, ModelState, Trainable};
use crate::error::{Error, Result};
use crate::losses::mse_target;

use super::optim::{adam_step, AdamState};
use super::ranking::adam_config;
use super::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegressionLog {
    /// Full-set training loss after each epoch.
    pub epoch_losses: Vec<f64>,
    /// 1-based epoch whose head was kept; 0 means the initial head.
    pub best_epoch: usize,
    pub best_loss: f64,
}

fn full_loss(state: &ModelState, features: &Tensor, targets: &[f64]) -> Result<f64> {
    let pred = predict_target(state, features)?;
    Ok(pred
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / targets.len() as f64)
}

/// Fit the target-regression head to pseudo-scores; encoder parameters are
/// never touched. Returns the head with the lowest full-set training loss.
pub fn train_regression(
    features: &Tensor,
    pseudo: &[f64],
    state: &ModelState,
    cfg: &TrainConfig,
    shuffle_seed: u64,
) -> Result<(ModelState, RegressionLog)> {
    let n = match features.shape() {
        [n, d] if *d == state.feature_dim() => *n,
        s => {
            return Err(Error::ShapeMismatch {
                op: "train_regression",
                left: vec![pseudo.len(), state.feature_dim()],
                right: s.to_vec(),
            })
        }
    };
    if n != pseudo.len() || n == 0 {
        return Err(Error::ShapeMismatch {
            op: "train_regression",
            left: vec![n],
            right: vec![pseudo.len()],
        });
    }
    if pseudo.iter().all(|v| *v == pseudo[0]) {
        return Err(Error::Degenerate(
            "all pseudo-scores are identical; nothing to regress".into(),
        ));
    }
    let adam = adam_config(cfg, cfg.regression_learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut opt = AdamState::new();
    let mut current = state.clone();
    let mut best = state.clone();
    let mut log = RegressionLog {
        best_loss: full_loss(state, features, pseudo)?,
        ..Default::default()
    };
    let d = state.feature_dim();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.regression_max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.regression_batch_size) {
            let mut rows = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                rows.extend_from_slice(features.row(i));
            }
            let targets: Vec<f64> = chunk.iter().map(|&i| pseudo[i]).collect();
            let mut g = Graph::new();
            let mut b = Bindings::new(Trainable::TargetHead);
            let x = g.constant(vec![chunk.len(), d], rows)?;
            let y = regress_target(&mut g, &mut b, &current, x)?;
            let loss = mse_target(&mut g, y, &targets)?;
            let grads = g.backward(loss)?;
            let collected = b.collect(&grads, &current);
            adam_step(&mut current, &mut opt, &collected, &adam)?;
        }
        let l = full_loss(&current, features, pseudo)?;
        log.epoch_losses.push(l);
        if l < log.best_loss {
            log.best_loss = l;
            log.best_epoch = epoch;
            best = current.clone();
        }
    }
    Ok((best, log))
}
