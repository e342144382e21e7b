//! Domain-aware reference retrieval over topic embeddings.
//!
//! For a target paper, every other paper whose cosine similarity exceeds
//! `gamma` is a candidate; of those, the `k` with the smallest publication
//! date gap are kept. The scan is exact.

use std::cmp::Ordering;
use std::collections::HashMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_K: usize = 2;

/// Immutable id → unit vector map aligned with a corpus.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f64>,
    dates: Vec<NaiveDate>,
    position: HashMap<String, usize>,
}

impl EmbeddingIndex {
    /// Aligns `embeddings` to corpus order and L2-normalizes every row.
    pub fn build(corpus: &Corpus, embeddings: &EmbeddingMatrix) -> Result<Self> {
        let dim = embeddings.dim();
        let rows: HashMap<&str, usize> = embeddings
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        if let Some(extra) = embeddings.ids().iter().find(|id| corpus.position(id).is_none()) {
            return Err(Error::Embedding(format!("row `{extra}` has no corpus record")));
        }
        let mut vectors = Vec::with_capacity(corpus.len() * dim);
        for rec in corpus.records() {
            let row = rows
                .get(rec.id.as_str())
                .ok_or_else(|| Error::Embedding(format!("no embedding row for `{}`", rec.id)))?;
            let v: Vec<f64> = embeddings.row(*row).iter().map(|&x| f64::from(x)).collect();
            let norm = l2_norm(&v);
            if norm == 0.0 {
                return Err(Error::ZeroVector(rec.id.clone()));
            }
            vectors.extend(v.iter().map(|x| x / norm));
        }
        Ok(EmbeddingIndex {
            dim,
            ids: corpus.records().iter().map(|r| r.id.clone()).collect(),
            vectors,
            dates: corpus.records().iter().map(|r| r.published_at).collect(),
            position: corpus
                .records()
                .iter()
                .enumerate()
                .map(|(i, r)| (r.id.clone(), i))
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn date(&self, i: usize) -> NaiveDate {
        self.dates[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.position.get(id).copied()
    }

    /// The stored unit vector of entry `i`.
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine similarity between two stored entries.
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        dot(self.vector(a), self.vector(b)).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub gamma: f64,
    pub k: usize,
    /// Only consider papers published on or before the target.
    pub past_only: bool,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams {
            gamma: DEFAULT_GAMMA,
            k: DEFAULT_K,
            past_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub id: String,
    pub similarity: f64,
    pub date_gap_days: u64,
}

/// The up-to-`k` references of one target, nearest in time first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub target_id: String,
    pub references: Vec<Reference>,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a·b / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

struct Candidate {
    index: usize,
    similarity: f64,
    gap: u64,
}

/// Ascending gap, then descending similarity, then ascending id.
fn candidate_order(index: &EmbeddingIndex, a: &Candidate, b: &Candidate) -> Ordering {
    a.gap
        .cmp(&b.gap)
        .then_with(|| b.similarity.total_cmp(&a.similarity))
        .then_with(|| index.id(a.index).cmp(index.id(b.index)))
}

/// Reference set of corpus entry `target`.
pub fn retrieve_for(index: &EmbeddingIndex, target: usize, params: &RetrievalParams) -> ReferenceSet {
    let target_date = index.date(target);
    let mut candidates: Vec<Candidate> = (0..index.len())
        .filter(|&i| i != target)
        .filter(|&i| !params.past_only || index.date(i) <= target_date)
        .filter_map(|i| {
            let similarity = index.similarity(target, i);
            (similarity > params.gamma).then(|| Candidate {
                index: i,
                similarity,
                gap: (index.date(i) - target_date).num_days().unsigned_abs(),
            })
        })
        .collect();
    if candidates.len() > params.k && params.k > 0 {
        candidates.select_nth_unstable_by(params.k - 1, |a, b| candidate_order(index, a, b));
    }
    candidates.truncate(params.k);
    candidates.sort_by(|a, b| candidate_order(index, a, b));
    ReferenceSet {
        target_id: index.id(target).to_string(),
        references: candidates
            .into_iter()
            .map(|c| Reference {
                id: index.id(c.index).to_string(),
                similarity: c.similarity,
                date_gap_days: c.gap,
            })
            .collect(),
    }
}

/// Reference set of `target_id`.
pub fn retrieve_references(
    index: &EmbeddingIndex,
    target_id: &str,
    params: &RetrievalParams,
) -> Result<ReferenceSet> {
    let target = index
        .position(target_id)
        .ok_or_else(|| Error::UnknownId(target_id.to_string()))?;
    Ok(retrieve_for(index, target, params))
}

/// Reference sets for every entry, in index order.
pub fn retrieve_all(index: &EmbeddingIndex, params: &RetrievalParams, exec: Execution) -> Vec<ReferenceSet> {
    exec::map_indexed(exec, index.len(), |i| retrieve_for(index, i, params))
}
