//! Progressive ranking losses.
//!
//! Every loss except MSE is a sum over refinement steps `j = 1..m`, each
//! step seeing its own temperature from a linear annealing plan. All
//! reductions are in `f64`, and all softmaxes are computed in log space.
//!
//! Each loss comes in two forms: a plain value function and, through
//! [`loss_and_grad`], the value together with its gradient with respect to
//! the predicted scores.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::logistic;

pub const DEFAULT_TAU_MAX: f64 = 1.0;
pub const DEFAULT_TAU_MIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    ListMle,
    ListNet,
    RankCosine,
    ApproxNdcg,
    RankNet,
    Mse,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::ListMle,
        LossKind::ListNet,
        LossKind::RankCosine,
        LossKind::ApproxNdcg,
        LossKind::RankNet,
        LossKind::Mse,
    ];

    pub fn token(self) -> &'static str {
        match self {
            LossKind::ListMle => "listmle",
            LossKind::ListNet => "listnet",
            LossKind::RankCosine => "rankcosine",
            LossKind::ApproxNdcg => "approxndcg",
            LossKind::RankNet => "ranknet",
            LossKind::Mse => "mse",
        }
    }

    /// Losses that compare papers within a batch need at least two of them.
    pub fn is_ranking(self) -> bool {
        self != LossKind::Mse
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.token() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

/// Linear temperature annealing from `tau_max` down to `tau_min` over `steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperaturePlan {
    tau_min: f64,
    tau_max: f64,
    steps: usize,
}

impl TemperaturePlan {
    pub fn new(tau_min: f64, tau_max: f64, steps: usize) -> Result<Self> {
        if !(tau_min > 0.0 && tau_min < tau_max && tau_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < tau_min < tau_max, got {tau_min} and {tau_max}"
            )));
        }
        if steps == 0 {
            return Err(Error::Config("temperature plan needs at least one step".into()));
        }
        Ok(TemperaturePlan {
            tau_min,
            tau_max,
            steps,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `τ(j) = τmax + (j/m)(τmin − τmax)` for `1 ≤ j ≤ m`; `τ(m)` is exactly `τmin`.
    pub fn temperature(&self, j: usize) -> Result<f64> {
        if j == 0 || j > self.steps {
            return Err(Error::InvalidArgument(format!(
                "step {j} outside 1..={}",
                self.steps
            )));
        }
        if j == self.steps {
            return Ok(self.tau_min);
        }
        let frac = j as f64 / self.steps as f64;
        Ok(self.tau_max + frac * (self.tau_min - self.tau_max))
    }
}

/// Free-function form of [`TemperaturePlan::temperature`].
pub fn temperature(j: usize, plan: &TemperaturePlan) -> Result<f64> {
    plan.temperature(j)
}

/// Predicted scores for steps `1..=m` (one row per step) and batch truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    predicted: Vec<Vec<f64>>,
    truth: Vec<f64>,
}

impl BatchScores {
    pub fn new(predicted: Vec<Vec<f64>>, truth: Vec<f64>) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if predicted.is_empty() {
            return Err(Error::InvalidArgument("no refinement steps in batch".into()));
        }
        if let Some(row) = predicted.iter().find(|r| r.len() != truth.len()) {
            return Err(Error::DimMismatch {
                expected: truth.len(),
                got: row.len(),
            });
        }
        if predicted.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("predicted scores".into()));
        }
        if truth.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument("truth scores must lie in [0, 1]".into()));
        }
        Ok(BatchScores { predicted, truth })
    }

    pub fn batch_size(&self) -> usize {
        self.truth.len()
    }

    pub fn steps(&self) -> usize {
        self.predicted.len()
    }

    /// Scores at step `j` (1-based).
    pub fn step(&self, j: usize) -> &[f64] {
        &self.predicted[j - 1]
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }
}

/// Loss value and its gradient with respect to `BatchScores` predictions
/// (same row layout: one row per step).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let lse = log_sum_exp(z.iter().copied());
    z.into_iter().map(|x| x - lse).collect()
}

/// Temperature softmax `exp(s_i/τ) / Σ exp(s_t/τ)`.
pub fn score_distribution(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty score vector".into()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(log_softmax(scores, tau).into_iter().map(f64::exp).collect())
}

/// Indices of the batch sorted by descending truth; ties keep input order.
pub fn ground_truth_permutation(truth: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| truth[b].total_cmp(&truth[a]));
    order
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `−log Π_i f̂_r(i) / Σ_{t≥i} f̂_r(t)` for one step, plus `∂/∂pred`.
fn listmle_step(pred: &[f64], order: &[usize], tau: f64, grad: &mut [f64]) -> f64 {
    let n = pred.len();
    let log_f = log_softmax(pred, tau);
    let mut suffix = vec![0.0; n];
    let mut acc = f64::NEG_INFINITY;
    for i in (0..n).rev() {
        let x = log_f[order[i]];
        acc = if acc == f64::NEG_INFINITY {
            x
        } else {
            let hi = acc.max(x);
            hi + ((acc - hi).exp() + (x - hi).exp()).ln()
        };
        suffix[i] = acc;
    }
    let mut loss = 0.0;
    for i in 0..n {
        loss -= log_f[order[i]] - suffix[i];
        grad[order[i]] -= 1.0 / tau;
        for &k in &order[i..] {
            grad[k] += (log_f[k] - suffix[i]).exp() / tau;
        }
    }
    loss
}

fn listnet_step(pred: &[f64], truth: &[f64], tau: f64, grad: &mut [f64]) -> f64 {
    let log_f = log_softmax(truth, tau);
    let log_q = log_softmax(pred, tau);
    let mut kl = 0.0;
    for i in 0..pred.len() {
        let f = log_f[i].exp();
        if f > 0.0 {
            kl += f * (log_f[i] - log_q[i]);
        }
        grad[i] += (log_q[i].exp() - f) / tau;
    }
    kl
}

fn rankcosine_step(pred: &[f64], truth: &[f64], tau: f64, grad: &mut [f64]) -> f64 {
    let p: Vec<f64> = log_softmax(truth, tau).into_iter().map(f64::exp).collect();
    let q: Vec<f64> = log_softmax(pred, tau).into_iter().map(f64::exp).collect();
    let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
    let cos = dot / (np * nq);
    // ∂loss/∂q, then through the softmax Jacobian
    let dq: Vec<f64> = (0..q.len())
        .map(|i| -0.5 * (p[i] / (np * nq) - cos * q[i] / (nq * nq)))
        .collect();
    let mean: f64 = dq.iter().zip(&q).map(|(g, x)| g * x).sum();
    for i in 0..q.len() {
        grad[i] += q[i] * (dq[i] - mean) / tau;
    }
    0.5 * (1.0 - cos)
}

fn gain(rel: f64) -> f64 {
    rel.exp2() - 1.0
}

/// Ideal DCG over the whole list with integer ranks.
fn ideal_dcg(rel: &[f64]) -> f64 {
    let mut sorted = rel.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted
        .iter()
        .enumerate()
        .map(|(i, &r)| gain(r) / ((i + 2) as f64).log2())
        .sum()
}

/// Soft ranks `1 + Σ_{t≠i} σ((s_t − s_i)/τ)`.
pub fn soft_ranks(pred: &[f64], tau: f64) -> Vec<f64> {
    (0..pred.len())
        .map(|i| {
            1.0 + (0..pred.len())
                .filter(|&t| t != i)
                .map(|t| logistic((pred[t] - pred[i]) / tau))
                .sum::<f64>()
        })
        .collect()
}

fn approx_ndcg_step(pred: &[f64], rel: &[f64], idcg: f64, tau: f64, grad: &mut [f64]) -> f64 {
    if idcg == 0.0 {
        return 0.0;
    }
    let n = pred.len();
    let ranks = soft_ranks(pred, tau);
    let mut dcg = 0.0;
    for i in 0..n {
        let g = gain(rel[i]);
        let log_r = (1.0 + ranks[i]).log2();
        dcg += g / log_r;
        // ∂loss/∂rank_i
        let d_rank = g / (idcg * log_r * log_r * (1.0 + ranks[i]) * std::f64::consts::LN_2);
        if d_rank == 0.0 {
            continue;
        }
        for t in 0..n {
            if t == i {
                continue;
            }
            let s = logistic((pred[t] - pred[i]) / tau);
            let ds = d_rank * s * (1.0 - s) / tau;
            grad[t] += ds;
            grad[i] -= ds;
        }
    }
    1.0 - dcg / idcg
}

fn ranknet_step(pred: &[f64], truth: &[f64], tau: f64, grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for a in 0..pred.len() {
        for b in 0..pred.len() {
            if truth[a] > truth[b] {
                let x = (pred[a] - pred[b]) / tau;
                loss += softplus(-x);
                let w = logistic(-x) / tau;
                grad[a] -= w;
                grad[b] += w;
            }
        }
    }
    loss
}

/// Computes the selected loss and its gradient.
///
/// `raw_listmle` swaps the annealed ListMLE for the classical untempered
/// form (every step at `τ = 1`); other losses ignore it.
pub fn loss_and_grad(
    kind: LossKind,
    batch: &BatchScores,
    plan: &TemperaturePlan,
    raw_listmle: bool,
) -> Result<LossOutput> {
    let m = batch.steps();
    if plan.steps() != m {
        return Err(Error::DimMismatch {
            expected: plan.steps(),
            got: m,
        });
    }
    let n = batch.batch_size();
    let truth = batch.truth();
    let mut grad = vec![vec![0.0; n]; m];
    let mut value = 0.0;
    match kind {
        LossKind::Mse => {
            let last = batch.step(m);
            for i in 0..n {
                let r = last[i] - truth[i];
                value += r * r / n as f64;
                grad[m - 1][i] = 2.0 * r / n as f64;
            }
        }
        _ => {
            let order = ground_truth_permutation(truth);
            let idcg = ideal_dcg(truth);
            for j in 1..=m {
                let tau = plan.temperature(j)?;
                let pred = batch.step(j);
                let g = &mut grad[j - 1];
                value += match kind {
                    LossKind::ListMle if raw_listmle => listmle_step(pred, &order, 1.0, g),
                    LossKind::ListMle => listmle_step(pred, &order, tau, g),
                    LossKind::ListNet => listnet_step(pred, truth, tau, g),
                    LossKind::RankCosine => rankcosine_step(pred, truth, tau, g),
                    LossKind::ApproxNdcg => approx_ndcg_step(pred, truth, idcg, tau, g),
                    LossKind::RankNet => ranknet_step(pred, truth, tau, g),
                    LossKind::Mse => unreachable!(),
                };
            }
        }
    }
    if !value.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{kind} loss")));
    }
    Ok(LossOutput { value, grad })
}

pub fn listmle_progressive(batch: &BatchScores, plan: &TemperaturePlan) -> Result<f64> {
    loss_and_grad(LossKind::ListMle, batch, plan, false).map(|o| o.value)
}

pub fn listnet_kl(batch: &BatchScores, plan: &TemperaturePlan) -> Result<f64> {
    loss_and_grad(LossKind::ListNet, batch, plan, false).map(|o| o.value)
}

pub fn rankcosine(batch: &BatchScores, plan: &TemperaturePlan) -> Result<f64> {
    loss_and_grad(LossKind::RankCosine, batch, plan, false).map(|o| o.value)
}

/// ApproxNDCG with the batch truth as relevance.
pub fn approx_ndcg(batch: &BatchScores, plan: &TemperaturePlan) -> Result<f64> {
    loss_and_grad(LossKind::ApproxNdcg, batch, plan, false).map(|o| o.value)
}

pub fn ranknet_pairwise(batch: &BatchScores, plan: &TemperaturePlan) -> Result<f64> {
    loss_and_grad(LossKind::RankNet, batch, plan, false).map(|o| o.value)
}

/// Mean squared error of the final step only.
pub fn mse_final(batch: &BatchScores) -> Result<f64> {
    let plan = TemperaturePlan::new(DEFAULT_TAU_MIN, DEFAULT_TAU_MAX, batch.steps())?;
    loss_and_grad(LossKind::Mse, batch, &plan, false).map(|o| o.value)
}
