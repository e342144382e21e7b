//! Synthetic corpora with a known, smooth score function of the embedding.
//!
//! Papers are drawn around a handful of topic centers so that same-topic
//! papers clear the default retrieval threshold. The score is
//! `clamp(0.5 + 0.3·tanh(1.5·a) + 0.1·sin(2·b), 0, 1)` where `a` and `b` are
//! scaled projections of the embedding on two fixed random directions.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Corpus, PaperRecord, Split};
use crate::embeddings::EmbeddingMatrix;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub papers: usize,
    pub dim: usize,
    pub topics: usize,
    /// Within-topic noise scale relative to the unit-norm center.
    pub spread: f64,
    /// Publication dates fall in `[2020-01-01, +date_span_days)`.
    pub date_span_days: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            papers: 2000,
            dim: 32,
            topics: 8,
            spread: 0.8,
            date_span_days: 1095,
            seed: 0,
        }
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// The ground-truth score of a unit embedding under the generator's
/// projection directions.
pub fn synthetic_score(embedding: &[f64], primary: &[f64], secondary: &[f64]) -> f64 {
    let scale = (embedding.len() as f64).sqrt();
    let a = scale * embedding.iter().zip(primary).map(|(x, w)| x * w).sum::<f64>();
    let b = scale * embedding.iter().zip(secondary).map(|(x, w)| x * w).sum::<f64>();
    (0.5 + 0.3 * (1.5 * a).tanh() + 0.1 * (2.0 * b).sin()).clamp(0.0, 1.0)
}

/// Generates a corpus (all records tagged train) and its embedding matrix.
pub fn generate(spec: &SyntheticSpec) -> Result<(Corpus, EmbeddingMatrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.topics.max(1))
        .map(|_| gaussian_unit(&mut rng, spec.dim))
        .collect();
    let primary = gaussian_unit(&mut rng, spec.dim);
    let secondary = gaussian_unit(&mut rng, spec.dim);
    let base = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");
    let noise = spec.spread / (spec.dim as f64).sqrt();

    let mut records = Vec::with_capacity(spec.papers);
    let mut ids = Vec::with_capacity(spec.papers);
    let mut data = Vec::with_capacity(spec.papers * spec.dim);
    for i in 0..spec.papers {
        let topic = rng.random_range(0..centers.len());
        let raw: Vec<f64> = centers[topic]
            .iter()
            .map(|c| c + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        // store the f32 row and score exactly what the index will see
        let row: Vec<f32> = raw.iter().map(|x| (x / norm) as f32).collect();
        let row_norm = row.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        let unit: Vec<f64> = row.iter().map(|&x| f64::from(x) / row_norm).collect();
        let day = rng.random_range(0..spec.date_span_days.max(1));
        let id = format!("syn-{i:05}");
        records.push(PaperRecord {
            id: id.clone(),
            title: format!("Synthetic paper {i}"),
            abstract_text: format!("Generated record {i} on topic {topic}."),
            topic_phrase: Some(format!("topic {topic}")),
            published_at: base + Days::new(day),
            raw_review_scores: None,
            score: synthetic_score(&unit, &primary, &secondary),
        });
        ids.push(id);
        data.extend(row);
    }
    let corpus = Corpus::from_records(records, Split::Train)?;
    let embeddings = EmbeddingMatrix::new(spec.dim, ids, data)?;
    Ok((corpus, embeddings))
}
