//! Tournament aggregation of pairwise rank probabilities into per-image
//! pseudo-scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::encoder::{rank_probability, ModelState};
use crate::error::{Error, Result};

/// `S(i) = #{j ≠ i : P(i beats j) > 0.5} / (n − 1)`.
///
/// With `sample = Some((m, seed))` each image meets `m` distinct random
/// opponents instead of all others and the count is divided by `m`.
pub fn tournament_scores<F>(n: usize, prob: F, sample: Option<(usize, u64)>) -> Result<Vec<f64>>
where
    F: Fn(usize, usize) -> Result<f64>,
{
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "aggregation needs at least 2 images, got {n}"
        )));
    }
    let mut rng = sample.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let opponents: Vec<usize> = match (&mut rng, sample) {
            (Some(rng), Some((m, _))) if m < n - 1 => {
                rand::seq::index::sample(rng, n - 1, m.max(1))
                    .into_iter()
                    .map(|k| if k >= i { k + 1 } else { k })
                    .collect()
            }
            _ => (0..n).filter(|&j| j != i).collect(),
        };
        let mut wins = 0usize;
        for &j in &opponents {
            if prob(i, j)? > 0.5 {
                wins += 1;
            }
        }
        scores.push(wins as f64 / opponents.len() as f64);
    }
    Ok(scores)
}

/// Tournament scores from cached features `[n, d]`.
pub fn aggregate_quality(
    state: &ModelState,
    features: &Tensor,
    sample: Option<(usize, u64)>,
) -> Result<Vec<f64>> {
    let n = match features.shape() {
        [n, d] if *d == state.feature_dim() => *n,
        s => {
            return Err(Error::ShapeMismatch {
                op: "aggregate_quality",
                left: vec![0, state.feature_dim()],
                right: s.to_vec(),
            })
        }
    };
    tournament_scores(
        n,
        |i, j| {
            let diff: Vec<f64> = features
                .row(i)
                .iter()
                .zip(features.row(j))
                .map(|(a, b)| a - b)
                .collect();
            rank_probability(state, &diff)
        },
        sample,
    )
}
