//! Training losses: source regression MSE, pairwise cross-entropy,
//! feature-correlation penalty, Gaussian-kernel MMD, center loss, classifier
//! rectification, their weighted sum, and the target regression MSE.

use log::warn;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Probability clamp used inside the logs of [`bce_rank`].
pub const PROB_EPS: f64 = 1e-7;
/// Lower bound on the MMD kernel bandwidth.
pub const BANDWIDTH_FLOOR: f64 = 1e-8;
/// Per-dimension variance under which a feature column is treated as constant.
pub const VARIANCE_GUARD: f64 = 1e-12;

/// Weights of the auxiliary terms; the pairwise cross-entropy has weight 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mmd: f64,
    pub center: f64,
    pub rec: f64,
    pub cor: f64,
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mmd: 1.0,
            center: 2e-1,
            rec: 1e-3,
            cor: 1e1,
            mse: 1e2,
        }
    }
}

/// Named loss terms, as accepted by `--losses`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Rank,
    Mmd,
    Center,
    Rec,
    Cor,
    Mse,
}

impl std::str::FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "rank" => LossTerm::Rank,
            "mmd" => LossTerm::Mmd,
            "center" => LossTerm::Center,
            "rec" => LossTerm::Rec,
            "cor" => LossTerm::Cor,
            "mse" => LossTerm::Mse,
            other => return Err(Error::Config(format!("unknown loss term {other:?}"))),
        })
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            mmd: 0.0,
            center: 0.0,
            rec: 0.0,
            cor: 0.0,
            mse: 0.0,
        }
    }

    /// Keep the weights of the listed terms and zero the rest. The ranking
    /// cross-entropy is always active.
    pub fn restricted_to(&self, terms: &[LossTerm]) -> Self {
        let on = |t| terms.contains(&t);
        Self {
            mmd: if on(LossTerm::Mmd) { self.mmd } else { 0.0 },
            center: if on(LossTerm::Center) { self.center } else { 0.0 },
            rec: if on(LossTerm::Rec) { self.rec } else { 0.0 },
            cor: if on(LossTerm::Cor) { self.cor } else { 0.0 },
            mse: if on(LossTerm::Mse) { self.mse } else { 0.0 },
        }
    }

    /// Parse a comma list such as `rank,mmd`.
    pub fn parse_terms(list: &str) -> Result<Vec<LossTerm>> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mmd", self.mmd),
            ("lambda_center", self.center),
            ("lambda_rec", self.rec),
            ("lambda_cor", self.cor),
            ("lambda_mse", self.mse),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative float, got {v}")));
            }
        }
        Ok(())
    }
}

/// Norm applied to the off-diagonal correlations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrNorm {
    /// `‖C − I‖²_F / d²`
    #[default]
    Squared,
    /// `‖C − I‖_F / d²`
    Plain,
}

fn vector_len(g: &Graph, v: Var, what: &str) -> Result<usize> {
    match g.shape(v) {
        [n] => Ok(*n),
        s => Err(Error::InvalidInput(format!("{what} must be a vector, got {s:?}"))),
    }
}

fn matrix_dims(g: &Graph, v: Var, what: &str) -> Result<(usize, usize)> {
    match g.shape(v) {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::InvalidInput(format!("{what} must be a matrix, got {s:?}"))),
    }
}

/// Mean squared error between a prediction vector and fixed targets.
pub fn mse(g: &mut Graph, predictions: Var, targets: &[f64]) -> Result<Var> {
    let n = vector_len(g, predictions, "predictions")?;
    if targets.is_empty() {
        return Err(Error::InvalidInput("mse of an empty batch".into()));
    }
    if n != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            left: vec![n],
            right: vec![targets.len()],
        });
    }
    let t = g.constant(vec![n], targets.to_vec())?;
    let diff = g.sub(predictions, t)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Source-domain regression loss against normalized ground-truth scores.
pub fn mse_source(g: &mut Graph, predictions: Var, targets: &[f64]) -> Result<Var> {
    mse(g, predictions, targets)
}

/// Target-domain regression loss against aggregated pseudo-labels.
pub fn mse_target(g: &mut Graph, predictions: Var, pseudo_labels: &[f64]) -> Result<Var> {
    mse(g, predictions, pseudo_labels)
}

/// Binary cross-entropy `−mean[y·log P + (1−y)·log(1−P)]` with `P` clamped
/// to `[ε, 1−ε]`.
pub fn bce_rank(g: &mut Graph, probs: Var, labels: &[f64]) -> Result<Var> {
    let n = vector_len(g, probs, "probabilities")?;
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "bce_rank",
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidInput(format!("rank label {bad} is not 0 or 1")));
    }
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(p)?;
    let q = g.rsub_scalar(1.0, p)?;
    let log_q = g.log(q)?;
    let y = g.constant(vec![n], labels.to_vec())?;
    let not_y = g.constant(vec![n], labels.iter().map(|v| 1.0 - v).collect())?;
    let a = g.mul(y, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

#[derive(Debug)]
pub struct CorrPenalty {
    pub loss: Var,
    /// Feature dimensions whose batch variance fell under [`VARIANCE_GUARD`];
    /// their correlations are treated as zero.
    pub degenerate_dims: Vec<usize>,
}

/// Penalty on the off-diagonal Pearson correlations between feature
/// dimensions of an `[N, d]` batch.
pub fn corr_penalty(g: &mut Graph, features: Var, norm: CorrNorm) -> Result<CorrPenalty> {
    let (n, d) = matrix_dims(g, features, "features")?;
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "correlation penalty needs at least 2 rows, got {n}"
        )));
    }
    let col_sum = g.sum_axis(features, 0)?;
    let col_mean = g.scale(col_sum, 1.0 / n as f64);
    let mean_rows = g.broadcast_rows(col_mean, n)?;
    let centered = g.sub(features, mean_rows)?;
    let sq = g.square(centered);
    let ss = g.sum_axis(sq, 0)?;
    let degenerate_dims: Vec<usize> = g
        .value(ss)
        .iter()
        .enumerate()
        .filter(|(_, v)| **v / (n as f64) < VARIANCE_GUARD)
        .map(|(i, _)| i)
        .collect();
    let mut mask = vec![1.0; d];
    let mut lift = vec![0.0; d];
    for &i in &degenerate_dims {
        mask[i] = 0.0;
        lift[i] = 1.0;
    }
    // Degenerate columns get a unit denominator and a zero numerator.
    let lift = g.constant(vec![d], lift)?;
    let ss = g.add(ss, lift)?;
    let norms = g.sqrt(ss)?;
    let norms = g.broadcast_rows(norms, n)?;
    let z = g.div(centered, norms)?;
    let z = if degenerate_dims.is_empty() {
        z
    } else {
        let m = g.constant(vec![d], mask)?;
        let m = g.broadcast_rows(m, n)?;
        g.mul(z, m)?
    };
    let zt = g.transpose(z)?;
    let corr = g.matmul(zt, z)?;
    let off: Vec<f64> = (0..d * d)
        .map(|k| if k / d == k % d { 0.0 } else { 1.0 })
        .collect();
    let off = g.constant(vec![d, d], off)?;
    let offdiag = g.mul(corr, off)?;
    let fro2 = g.sq_norm(offdiag);
    let scale = 1.0 / (d * d) as f64;
    let loss = match norm {
        CorrNorm::Squared => g.scale(fro2, scale),
        CorrNorm::Plain if g.scalar(fro2) > 0.0 => {
            let r = g.sqrt(fro2)?;
            g.scale(r, scale)
        }
        CorrNorm::Plain => g.scale(fro2, 0.0),
    };
    if !degenerate_dims.is_empty() {
        log::debug!("correlation penalty: degenerate dims {degenerate_dims:?}");
    }
    Ok(CorrPenalty {
        loss,
        degenerate_dims,
    })
}

/// Median of the squared pairwise distances among the pooled rows of two
/// `[·, d]` row-major matrices (unordered pairs, no self-pairs).
pub fn median_bandwidth(source: &[f64], target: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || source.len() % dim != 0 || target.len() % dim != 0 {
        return Err(Error::InvalidInput(format!(
            "bandwidth inputs of length {} and {} are not multiples of d={dim}",
            source.len(),
            target.len()
        )));
    }
    let rows: Vec<&[f64]> = source.chunks(dim).chain(target.chunks(dim)).collect();
    if rows.len() < 2 {
        return Err(Error::InvalidInput("bandwidth needs at least two points".into()));
    }
    let mut d2 = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d2.push(
                rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>(),
            );
        }
    }
    d2.sort_by(f64::total_cmp);
    let m = d2.len();
    let median = if m % 2 == 1 {
        d2[m / 2]
    } else {
        0.5 * (d2[m / 2 - 1] + d2[m / 2])
    };
    if median < BANDWIDTH_FLOOR {
        warn!("median bandwidth {median:e} below floor; using {BANDWIDTH_FLOOR:e}");
        return Ok(BANDWIDTH_FLOOR);
    }
    Ok(median)
}

fn kernel_mean(g: &mut Graph, a: Var, b: Var, sigma2: f64) -> Result<Var> {
    let d2 = g.sq_dist(a, b)?;
    let scaled = g.scale(d2, -1.0 / (2.0 * sigma2));
    let k = g.exp(scaled)?;
    Ok(g.mean_sorted(k))
}

/// Biased MMD² between two feature sets with the Gaussian kernel
/// `exp(−‖x−y‖² / (2σ²))`; `sigma2` is treated as a constant.
pub fn mmd_loss(g: &mut Graph, source: Var, target: Var, sigma2: f64) -> Result<Var> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "kernel bandwidth must be positive, got {sigma2}"
        )));
    }
    let (_, ds) = matrix_dims(g, source, "source features")?;
    let (_, dt) = matrix_dims(g, target, "target features")?;
    if ds != dt {
        return Err(Error::ShapeMismatch {
            op: "mmd_loss",
            left: g.shape(source).to_vec(),
            right: g.shape(target).to_vec(),
        });
    }
    let kss = kernel_mean(g, source, source, sigma2)?;
    let ktt = kernel_mean(g, target, target, sigma2)?;
    let kst = kernel_mean(g, source, target, sigma2)?;
    let within = g.add(kss, ktt)?;
    let cross = g.scale(kst, 2.0);
    g.sub(within, cross)
}

fn check_center(g: &Graph, c: Var, d: usize) -> Result<()> {
    if g.shape(c) != [d] {
        return Err(Error::ShapeMismatch {
            op: "center",
            left: vec![d],
            right: g.shape(c).to_vec(),
        });
    }
    Ok(())
}

/// Mean squared distance of each source ranking feature to its class center.
pub fn center_loss(
    g: &mut Graph,
    features: Var,
    labels: &[f64],
    center0: Var,
    center1: Var,
) -> Result<Var> {
    let (n, d) = matrix_dims(g, features, "features")?;
    check_center(g, center0, d)?;
    check_center(g, center1, d)?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "center_loss",
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    let index = labels
        .iter()
        .map(|&y| match y {
            y if y == 0.0 => Ok(0),
            y if y == 1.0 => Ok(1),
            other => Err(Error::InvalidInput(format!("rank label {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<usize>>>()?;
    let c0 = g.reshape(center0, vec![1, d])?;
    let c1 = g.reshape(center1, vec![1, d])?;
    let centers = g.concat(&[c0, c1])?;
    let assigned = g.gather_rows(centers, &index)?;
    let diff = g.sub(features, assigned)?;
    let sq = g.sq_norm(diff);
    Ok(g.scale(sq, 1.0 / n as f64))
}

fn row_sq_dist_to(g: &mut Graph, features: Var, center: Var, n: usize) -> Result<Var> {
    let c = g.broadcast_rows(center, n)?;
    let diff = g.sub(features, c)?;
    let sq = g.square(diff);
    g.sum_axis(sq, 1)
}

/// Soft assignment of target ranking features to the two class centers,
/// weighted by the classifier probability.
pub fn rectification_loss(
    g: &mut Graph,
    features: Var,
    probs: Var,
    center0: Var,
    center1: Var,
) -> Result<Var> {
    let (k, d) = matrix_dims(g, features, "features")?;
    check_center(g, center0, d)?;
    check_center(g, center1, d)?;
    let kp = vector_len(g, probs, "probabilities")?;
    if kp != k {
        return Err(Error::ShapeMismatch {
            op: "rectification_loss",
            left: vec![k],
            right: vec![kp],
        });
    }
    if let Some(bad) = g.value(probs).iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("probability {bad} outside [0, 1]")));
    }
    let d0 = row_sq_dist_to(g, features, center0, k)?;
    let d1 = row_sq_dist_to(g, features, center1, k)?;
    let q = g.rsub_scalar(1.0, probs)?;
    let a = g.mul(q, d0)?;
    let b = g.mul(probs, d1)?;
    let s = g.add(a, b)?;
    Ok(g.mean(s))
}

/// Graph nodes feeding [`total_loss`].
#[derive(Debug, Clone)]
pub struct LossInputs {
    /// `[N, d]` source ranking features.
    pub source_rank: Var,
    /// `[N]` classifier probabilities on source pairs.
    pub source_prob: Var,
    pub labels: Vec<f64>,
    /// `[K, d]` target ranking features and `[K]` probabilities, when any.
    pub target_rank: Option<Var>,
    pub target_prob: Option<Var>,
    /// Source-regressor outputs and their normalized ground truth.
    pub source_pred: Var,
    pub source_truth: Vec<f64>,
    pub center0: Var,
    pub center1: Var,
    /// Fixed MMD bandwidth σ²; `None` uses the batch median heuristic.
    pub mmd_bandwidth: Option<f64>,
}

/// Unweighted value of each term plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub pre: f64,
    pub mmd: f64,
    pub center: f64,
    pub rec: f64,
    pub cor: f64,
    pub mse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,L_pre,L_mmd,L_ct,L_rec,L_cor,L_mse,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.pre, self.mmd, self.center, self.rec, self.cor, self.mse, self.total
        )
    }
}

/// `L_pre + λ0·L_mmd + λ1·L_ct + λ2·L_rec + λ3·L_cor + λ4·L_mse`.
pub fn total_loss(
    g: &mut Graph,
    inputs: &LossInputs,
    w: &LossWeights,
    corr_norm: CorrNorm,
) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let (n, _) = matrix_dims(g, inputs.source_rank, "source ranking features")?;
    let k = match inputs.target_rank {
        Some(t) => matrix_dims(g, t, "target ranking features")?.0,
        None => 0,
    };
    if (w.mmd > 0.0 || w.cor > 0.0) && n < 2 {
        return Err(Error::InvalidInput(format!(
            "MMD / correlation terms need at least 2 source pairs, got {n}"
        )));
    }
    if (w.mmd > 0.0 || w.rec > 0.0) && k < 2 {
        return Err(Error::InvalidInput(format!(
            "MMD / rectification terms need at least 2 target pairs, got {k}"
        )));
    }

    let mut terms: Vec<(&'static str, Var, f64)> = Vec::new();
    let pre = bce_rank(g, inputs.source_prob, &inputs.labels)?;
    terms.push(("L_pre", pre, 1.0));
    if let (Some(t), Some(tp)) = (inputs.target_rank, inputs.target_prob) {
        let sigma2 = match inputs.mmd_bandwidth {
            Some(s) => s,
            None => median_bandwidth(g.value(inputs.source_rank), g.value(t), g.shape(t)[1])?,
        };
        let mmd = mmd_loss(g, inputs.source_rank, t, sigma2)?;
        terms.push(("L_mmd", mmd, w.mmd));
        let rec = rectification_loss(g, t, tp, inputs.center0, inputs.center1)?;
        terms.push(("L_rec", rec, w.rec));
    }
    let ct = center_loss(
        g,
        inputs.source_rank,
        &inputs.labels,
        inputs.center0,
        inputs.center1,
    )?;
    terms.push(("L_ct", ct, w.center));
    if n >= 2 {
        let cor = corr_penalty(g, inputs.source_rank, corr_norm)?;
        terms.push(("L_cor", cor.loss, w.cor));
    }
    let mse = mse_source(g, inputs.source_pred, &inputs.source_truth)?;
    terms.push(("L_mse", mse, w.mse));

    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for (name, v, weight) in terms {
        let value = g.scalar(v);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
        match name {
            "L_pre" => breakdown.pre = value,
            "L_mmd" => breakdown.mmd = value,
            "L_ct" => breakdown.center = value,
            "L_rec" => breakdown.rec = value,
            "L_cor" => breakdown.cor = value,
            _ => breakdown.mse = value,
        }
        if weight == 0.0 {
            continue;
        }
        let weighted = if weight == 1.0 { v } else { g.scale(v, weight) };
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("cross-entropy term always present");
    breakdown.total = g.scalar(total);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok((total, breakdown))
}
