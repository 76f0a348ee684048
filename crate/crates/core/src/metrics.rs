//! Correlation and error metrics, and the five-parameter logistic mapping
//! applied before PLCC / MAE / RMSE.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

fn check_pair(pred: &[f64], truth: &[f64], min_len: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            left: vec![pred.len()],
            right: vec![truth.len()],
        });
    }
    if pred.len() < min_len {
        return Err(Error::InvalidInput(format!(
            "need at least {min_len} samples, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> Result<f64> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn plcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    pearson_unchecked(pred, truth)
}

pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    pearson_unchecked(&average_ranks(pred), &average_ranks(truth))
}

/// Dense ranks `0..k` in value order.
fn dense_ranks(x: &[f64]) -> Vec<usize> {
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    x.iter()
        .map(|v| sorted.partition_point(|s| s < v))
        .collect()
}

fn tied_pairs(sorted_keys: impl Iterator<Item = (usize, usize)>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev = None;
    for key in sorted_keys {
        if Some(key) == prev {
            run += 1;
        } else {
            total += run * (run.saturating_sub(1)) / 2;
            run = 1;
            prev = Some(key);
        }
    }
    total + run * run.saturating_sub(1) / 2
}

/// Kendall tau-b in O(n log n): sort by `(x, y)`, then count discordant
/// pairs with a Fenwick tree over the ranks of `y`.
pub fn krcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    let n = pred.len();
    let (rx, ry) = (dense_ranks(pred), dense_ranks(truth));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (rx[i], ry[i]));

    let ky = ry.iter().max().map_or(0, |m| m + 1);
    let mut tree = vec![0u64; ky + 1];
    let mut discordant = 0u64;
    for (seen, &i) in order.iter().enumerate() {
        // earlier entries with a strictly larger y rank
        let mut le = 0u64;
        let mut k = ry[i] + 1;
        while k > 0 {
            le += tree[k];
            k -= k & k.wrapping_neg();
        }
        discordant += seen as u64 - le;
        let mut k = ry[i] + 1;
        while k <= ky {
            tree[k] += 1;
            k += k & k.wrapping_neg();
        }
    }

    let x_ties = tied_pairs(order.iter().map(|&i| (rx[i], 0)));
    let joint_ties = tied_pairs(order.iter().map(|&i| (rx[i], ry[i])));
    let mut by_y: Vec<usize> = ry.clone();
    by_y.sort_unstable();
    let y_ties = tied_pairs(by_y.into_iter().map(|v| (v, 0)));

    let total = (n as u64) * (n as u64 - 1) / 2;
    if x_ties == total || y_ties == total {
        return Err(Error::Degenerate("correlation of a constant vector".into()));
    }
    let num = total as f64 - x_ties as f64 - y_ties as f64 + joint_ties as f64
        - 2.0 * discordant as f64;
    let den = (((total - x_ties) as f64) * ((total - y_ties) as f64)).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    let mse = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Shape of the logistic term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogisticForm {
    /// `β1·(½ − exp(−β2(s − β3))) + β4·s + β5`
    #[default]
    Exponential,
    /// `β1·(½ − 1/(1 + exp(β2(s − β3)))) + β4·s + β5`
    Sigmoid,
}

pub const MAX_FIT_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub beta: [f64; 5],
    pub form: LogisticForm,
    pub converged: bool,
    pub mapped: Vec<f64>,
}

impl LogisticFit {
    /// True when the mapping is strictly monotone across the given points.
    pub fn is_strictly_monotone(&self, pred: &[f64]) -> bool {
        let mut pts: Vec<(f64, f64)> = pred.iter().map(|&s| (s, eval_form(self.form, &self.beta, s))).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.dedup_by(|a, b| a.0 == b.0);
        let up = pts.windows(2).all(|w| w[1].1 > w[0].1);
        let down = pts.windows(2).all(|w| w[1].1 < w[0].1);
        up || down
    }
}

fn eval_form(form: LogisticForm, b: &[f64; 5], s: f64) -> f64 {
    let z = b[1] * (s - b[2]);
    let g = match form {
        LogisticForm::Exponential => 0.5 - (-z).exp(),
        LogisticForm::Sigmoid => 0.5 - 1.0 / (1.0 + z.exp()),
    };
    b[0] * g + b[3] * s + b[4]
}

fn jacobian_row(form: LogisticForm, b: &[f64; 5], s: f64) -> [f64; 5] {
    let z = b[1] * (s - b[2]);
    // g(z) and dg/dz
    let (g, dg) = match form {
        LogisticForm::Exponential => {
            let e = (-z).exp();
            (0.5 - e, e)
        }
        LogisticForm::Sigmoid => {
            let q = 1.0 / (1.0 + z.exp());
            (0.5 - q, q * (1.0 - q))
        }
    };
    [g, b[0] * dg * (s - b[2]), -b[0] * dg * b[1], s, 1.0]
}

fn sse(form: LogisticForm, b: &[f64; 5], pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(&s, &t)| {
            let r = eval_form(form, b, s) - t;
            r * r
        })
        .sum()
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve5(mut a: [[f64; 5]; 5], mut rhs: [f64; 5]) -> Option<[f64; 5]> {
    for col in 0..5 {
        let piv = (col..5).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 || !a[piv][col].is_finite() {
            return None;
        }
        a.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..5 {
            let f = a[row][col] / a[col][col];
            for k in col..5 {
                a[row][k] -= f * a[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 5];
    for row in (0..5).rev() {
        let s: f64 = (row + 1..5).map(|k| a[row][k] * x[k]).sum();
        x[row] = (rhs[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Levenberg–Marquardt from `start`; returns the final parameters, their
/// SSE and whether a stopping criterion fired before the iteration cap.
fn levenberg_marquardt(
    form: LogisticForm,
    start: [f64; 5],
    pred: &[f64],
    truth: &[f64],
) -> ([f64; 5], f64, bool) {
    let mut beta = start;
    let mut cost = sse(form, &beta, pred, truth);
    if !cost.is_finite() {
        return (beta, cost, false);
    }
    let mut lambda = 1e-3;
    for _ in 0..MAX_FIT_ITERATIONS {
        if cost <= 1e-30 {
            return (beta, cost, true);
        }
        let mut a = [[0.0; 5]; 5];
        let mut g = [0.0; 5];
        for (&s, &t) in pred.iter().zip(truth) {
            let j = jacobian_row(form, &beta, s);
            let r = eval_form(form, &beta, s) - t;
            for p in 0..5 {
                g[p] += j[p] * r;
                for q in 0..5 {
                    a[p][q] += j[p] * j[q];
                }
            }
        }
        let mut damped = a;
        for p in 0..5 {
            damped[p][p] += lambda * a[p][p].max(1e-12);
        }
        let step = solve5(damped, g.map(|v| -v));
        let candidate = step.map(|d| {
            let mut b = beta;
            for p in 0..5 {
                b[p] += d[p];
            }
            (b, d)
        });
        match candidate {
            Some((b, d)) => {
                let c = sse(form, &b, pred, truth);
                if c.is_finite() && c < cost {
                    let small_gain = cost - c <= 1e-12 * cost;
                    let small_step = d
                        .iter()
                        .zip(&b)
                        .all(|(dp, bp)| dp.abs() <= 1e-12 * (bp.abs() + 1e-12));
                    beta = b;
                    cost = c;
                    lambda = (lambda / 3.0).max(1e-15);
                    if small_gain || small_step {
                        return (beta, cost, true);
                    }
                    continue;
                }
            }
            None => {}
        }
        lambda *= 2.0;
        if lambda > 1e20 {
            // no descent direction left
            return (beta, cost, true);
        }
    }
    (beta, cost, false)
}

/// Fit the logistic mapping `pred → truth` by damped least squares. Falls
/// back to the identity mapping when no start converges.
pub fn logistic_fit(pred: &[f64], truth: &[f64], form: LogisticForm) -> Result<LogisticFit> {
    check_pair(pred, truth, 5)?;
    let n = pred.len() as f64;
    let (mp, mt) = (mean(pred), mean(truth));
    let sp = (pred.iter().map(|v| (v - mp) * (v - mp)).sum::<f64>() / n).sqrt();
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let default_start = [hi - lo, 1.0 / (sp + 1e-8), mp, 0.0, mt];
    // least-squares line, which the mapping can represent exactly with β1 = 0
    let cov: f64 = pred.iter().zip(truth).map(|(p, t)| (p - mp) * (t - mt)).sum();
    let slope = if sp > 0.0 { cov / (sp * sp * n) } else { 0.0 };
    let linear_start = [0.0, default_start[1], mp, slope, mt - slope * mp];

    let mut best: Option<([f64; 5], f64)> = None;
    for start in [default_start, linear_start] {
        let (b, c, ok) = levenberg_marquardt(form, start, pred, truth);
        if ok && c.is_finite() && best.is_none_or(|(_, bc)| c < bc) {
            best = Some((b, c));
        }
    }
    let (beta, converged) = match best {
        Some((b, _)) => (b, true),
        None => {
            warn!("logistic fit did not converge in {MAX_FIT_ITERATIONS} iterations; using identity mapping");
            ([0.0, 0.0, 0.0, 1.0, 0.0], false)
        }
    };
    let mapped = pred.iter().map(|&s| eval_form(form, &beta, s)).collect();
    Ok(LogisticFit {
        beta,
        form,
        converged,
        mapped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub srcc: f64,
    pub krcc: f64,
    pub plcc: f64,
    pub mae: f64,
    pub rmse: f64,
    pub beta: [f64; 5],
    pub fit_converged: bool,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "srcc,krcc,plcc,mae,rmse,beta1,beta2,beta3,beta4,beta5,fit_converged";

    pub fn to_csv(&self) -> String {
        let b = &self.beta;
        format!(
            "{}\n{},{},{},{},{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.srcc,
            self.krcc,
            self.plcc,
            self.mae,
            self.rmse,
            b[0],
            b[1],
            b[2],
            b[3],
            b[4],
            self.fit_converged
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "SRCC  {:.4}", self.srcc);
        let _ = writeln!(s, "KRCC  {:.4}", self.krcc);
        let _ = writeln!(s, "PLCC  {:.4}", self.plcc);
        let _ = writeln!(s, "MAE   {:.4}", self.mae);
        let _ = writeln!(s, "RMSE  {:.4}", self.rmse);
        let _ = writeln!(
            s,
            "logistic beta = [{}] (converged: {})",
            self.beta.map(|v| format!("{v:.6}")).join(", "),
            self.fit_converged
        );
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// SRCC/KRCC on raw predictions; PLCC/MAE/RMSE after the logistic mapping.
pub fn evaluate(pred: &[f64], truth: &[f64], form: LogisticForm) -> Result<EvalReport> {
    let fit = logistic_fit(pred, truth, form)?;
    Ok(EvalReport {
        srcc: srcc(pred, truth)?,
        krcc: krcc(pred, truth)?,
        plcc: plcc(&fit.mapped, truth)?,
        mae: mae(&fit.mapped, truth)?,
        rmse: rmse(&fit.mapped, truth)?,
        beta: fit.beta,
        fit_converged: fit.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_correlation_basics() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(srcc(&a, &a).unwrap(), 1.0);
        assert_eq!(srcc(&a, &r).unwrap(), -1.0);
        assert_eq!(krcc(&a, &a).unwrap(), 1.0);
        assert_eq!(krcc(&a, &r).unwrap(), -1.0);
        assert!((krcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(srcc(&[1.0, 1.0, 1.0], &a[..3]).is_err());
        assert!(krcc(&[1.0, 1.0, 1.0], &a[..3]).is_err());
        assert!(srcc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn errors_and_identity() {
        let a = [0.5, 1.5];
        let b = [1.0, 1.0];
        assert_eq!(mae(&a, &b).unwrap(), 0.5);
        assert_eq!(rmse(&a, &b).unwrap(), 0.5);
        assert!(rmse(&[0.0, 3.0], &b).unwrap() > mae(&[0.0, 3.0], &b).unwrap());
    }

    #[test]
    fn fit_recovers_synthesized_curve() {
        let beta = [2.0, 1.5, 0.4, 0.3, 1.0];
        let pred: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let truth: Vec<f64> = pred
            .iter()
            .map(|&s| eval_form(LogisticForm::Exponential, &beta, s))
            .collect();
        let fit = logistic_fit(&pred, &truth, LogisticForm::Exponential).unwrap();
        assert!(fit.converged);
        assert!(rmse(&fit.mapped, &truth).unwrap() < 1e-6);
    }

    #[test]
    fn sigmoid_form_fits_too() {
        let beta = [3.0, 8.0, 0.5, 0.1, 2.0];
        let pred: Vec<f64> = (0..25).map(|i| i as f64 / 24.0).collect();
        let truth: Vec<f64> = pred
            .iter()
            .map(|&s| eval_form(LogisticForm::Sigmoid, &beta, s))
            .collect();
        let fit = logistic_fit(&pred, &truth, LogisticForm::Sigmoid).unwrap();
        assert!(rmse(&fit.mapped, &truth).unwrap() < 1e-6);
    }

    #[test]
    fn perfect_prediction_report() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = evaluate(&x, &x, LogisticForm::default()).unwrap();
        assert_eq!((r.srcc, r.krcc), (1.0, 1.0));
        assert!((r.plcc - 1.0).abs() < 1e-12);
        assert!(r.rmse < 1e-9 && r.mae < 1e-9);
        assert!(r.to_csv().starts_with(EvalReport::CSV_HEADER));
    }
}
