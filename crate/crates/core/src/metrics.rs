//! Ranking metrics: NDCG@K, Spearman's ρ and Kendall's τ-a.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// NDCG cutoffs reported by default.
pub const REPORT_CUTOFFS: [usize; 2] = [10, 20];

fn check_pair(predicted: &[f64], truth: &[f64]) -> Result<()> {
    if predicted.len() != truth.len() {
        return Err(Error::DimMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    if predicted.iter().chain(truth).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

fn cmp(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).expect("finite values")
}

fn gain(rel: f64) -> f64 {
    rel.exp2() - 1.0
}

fn dcg(order: &[usize], rel: &[f64], k: usize) -> f64 {
    order[..k]
        .iter()
        .enumerate()
        .map(|(pos, &i)| gain(rel[i]) / ((pos + 2) as f64).log2())
        .sum()
}

/// Items sorted by descending score, ties by ascending index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| cmp(scores[b], scores[a]).then(a.cmp(&b)));
    order
}

/// NDCG@K with gains `2^rel − 1`; 1 when the ideal DCG is zero.
pub fn ndcg_at_k(predicted: &[f64], truth: &[f64], k: usize) -> Result<f64> {
    check_pair(predicted, truth)?;
    let n = truth.len();
    if n == 0 || k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("NDCG cutoff {k} for {n} items")));
    }
    let ideal = dcg(&descending_order(truth), truth, k);
    if ideal == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg(&descending_order(predicted), truth, k) / ideal)
}

/// 1-based ranks in ascending value order; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| cmp(values[a], values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's ρ as the Pearson correlation of average ranks.
///
/// Returns [`Error::Degenerate`] when either side is constant.
pub fn spearman_rho(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(predicted, truth)?;
    if truth.len() < 2 {
        return Err(Error::InvalidArgument("Spearman needs at least two items".into()));
    }
    pearson(&average_ranks(predicted), &average_ranks(truth))
        .ok_or_else(|| Error::Degenerate("Spearman rho of a constant ranking".into()))
}

/// Kendall's τ-a: `(C − D) / (n(n−1)/2)`; pairs tied on either side count
/// toward neither `C` nor `D`.
///
/// Counts in `O(n log n)` by sorting on `(predicted, truth)` and counting
/// inversions of the truth sequence with a merge sort.
pub fn kendall_tau(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(predicted, truth)?;
    let n = truth.len();
    if n < 2 {
        return Err(Error::InvalidArgument("Kendall needs at least two items".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp(predicted[a], predicted[b]).then(cmp(truth[a], truth[b])));

    let pairs = |t: u64| t * t.saturating_sub(1) / 2;
    let mut tied_x = 0u64;
    let mut tied_xy = 0u64;
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        if predicted[a] == predicted[b] {
            run_x += 1;
            if truth[a] == truth[b] {
                run_xy += 1;
            } else {
                tied_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            tied_x += pairs(run_x);
            tied_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    tied_x += pairs(run_x);
    tied_xy += pairs(run_xy);

    let mut ys: Vec<f64> = order.iter().map(|&i| truth[i]).collect();
    let mut buf = ys.clone();
    let discordant = merge_count(&mut ys, &mut buf);

    let mut tied_y = 0u64;
    let mut run = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            tied_y += pairs(run);
            run = 1;
        }
    }
    tied_y += pairs(run);

    let total = pairs(n as u64);
    let untied = (total + tied_xy - tied_x - tied_y) as i64;
    let diff = untied - 2 * discordant as i64;
    Ok(diff as f64 / total as f64)
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            count += (mid - i) as u64;
            buf[k] = v[j];
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    count
}

/// Metrics over one evaluated list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEval {
    pub n: usize,
    /// NDCG keyed by cutoff; cutoffs larger than `n` are omitted.
    pub ndcg: BTreeMap<usize, f64>,
    /// `None` when the correlation is degenerate.
    pub spearman: Option<f64>,
    pub kendall: f64,
}

impl RankingEval {
    pub fn compute(predicted: &[f64], truth: &[f64], cutoffs: &[usize]) -> Result<Self> {
        check_pair(predicted, truth)?;
        let n = truth.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two papers to evaluate, got {n}"
            )));
        }
        let mut ndcg = BTreeMap::new();
        for &k in cutoffs.iter().filter(|&&k| k >= 1 && k <= n) {
            ndcg.insert(k, ndcg_at_k(predicted, truth, k)?);
        }
        let spearman = match spearman_rho(predicted, truth) {
            Ok(r) => Some(r),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(RankingEval {
            n,
            ndcg,
            spearman,
            kendall: kendall_tau(predicted, truth)?,
        })
    }

    /// Looks up a selection metric token: `ndcg@K`, `spearman` or `kendall`.
    /// Degenerate or missing values read as negative infinity.
    pub fn metric(&self, token: &str) -> Result<f64> {
        if let Some(k) = token.strip_prefix("ndcg@") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::Config(format!("bad metric `{token}`")))?;
            return Ok(self.ndcg.get(&k).copied().unwrap_or(f64::NEG_INFINITY));
        }
        match token {
            "spearman" => Ok(self.spearman.unwrap_or(f64::NEG_INFINITY)),
            "kendall" => Ok(self.kendall),
            _ => Err(Error::Config(format!("unknown metric `{token}`"))),
        }
    }

    pub const CSV_HEADER: &'static str = "n,ndcg@10,ndcg@20,spearman,kendall";

    pub fn csv_row(&self) -> String {
        let ndcg = |k| self.ndcg.get(&k).map(|v| v.to_string()).unwrap_or_default();
        let spearman = self
            .spearman
            .map(|v| v.to_string())
            .unwrap_or_else(|| "degenerate".into());
        format!(
            "{},{},{},{},{}",
            self.n,
            ndcg(10),
            ndcg(20),
            spearman,
            self.kendall
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", Self::CSV_HEADER).unwrap();
        writeln!(s, "{}", self.csv_row()).unwrap();
        s
    }
}
