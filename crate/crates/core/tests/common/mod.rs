//! Naive quadratic-time metric oracles shared by the integration tests.
#![allow(dead_code)]

/// 0-based position of every item when sorted by descending score, ties by index.
pub fn naive_positions(scores: &[f64]) -> Vec<usize> {
    (0..scores.len())
        .map(|i| {
            (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
        })
        .collect()
}

pub fn naive_ndcg(pred: &[f64], truth: &[f64], k: usize) -> f64 {
    let dcg = |scores: &[f64]| -> f64 {
        naive_positions(scores)
            .iter()
            .zip(truth)
            .filter(|(&p, _)| p < k)
            .map(|(&p, &t)| (2f64.powf(t) - 1.0) / (p as f64 + 2.0).log2())
            .sum()
    };
    let ideal = dcg(truth);
    if ideal == 0.0 {
        1.0
    } else {
        dcg(pred) / ideal
    }
}

pub fn naive_spearman(pred: &[f64], truth: &[f64]) -> Option<f64> {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let below = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (a, b) = (ranks(pred), ranks(truth));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

pub fn naive_kendall(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let a = (pred[i] - pred[j]).partial_cmp(&0.0).unwrap() as i32 as f64;
            let b = (truth[i] - truth[j]).partial_cmp(&0.0).unwrap() as i32 as f64;
            s += a * b;
        }
    }
    s / (n * (n - 1) / 2) as f64
}
