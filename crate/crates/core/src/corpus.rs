//! Paper corpora: JSONL ingestion, review-score aggregation and splits.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum distance from the mean review score a rating may have and still
/// count towards the aggregate.
pub const REVIEW_OUTLIER_MARGIN: f64 = 3.0;

/// Tolerance used when checking a stored score against its raw reviews.
const AGGREGATE_TOLERANCE: f64 = 1e-9;

/// One paper with its ground-truth evaluation target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_phrase: Option<String>,
    pub published_at: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_review_scores: Option<Vec<f64>>,
    /// Normalized ground truth in `[0, 1]`.
    pub score: f64,
}

/// Wire shape of a corpus line; the date stays a string so parse failures
/// can be attributed to the field.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    title: String,
    #[serde(rename = "abstract")]
    abstract_text: String,
    #[serde(default)]
    topic_phrase: Option<String>,
    published_at: String,
    #[serde(default)]
    raw_review_scores: Option<Vec<f64>>,
    score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// An ordered set of papers with one split tag per record.
#[derive(Debug, Clone)]
pub struct Corpus {
    records: Vec<PaperRecord>,
    splits: Vec<Split>,
    position: HashMap<String, usize>,
}

/// Sidecar file recording non-train split membership.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitAssignment {
    pub validation_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_ids: Vec<String>,
}

impl Corpus {
    /// Builds a corpus, checking record invariants. Every record starts in `split`.
    pub fn from_records(records: Vec<PaperRecord>, split: Split) -> Result<Self> {
        let mut position = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let line = i + 1;
            validate_record(rec, line)?;
            if position.insert(rec.id.clone(), i).is_some() {
                return Err(Error::corpus(line, "id", format!("duplicate id `{}`", rec.id)));
            }
        }
        let splits = vec![split; records.len()];
        Ok(Corpus {
            records,
            splits,
            position,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PaperRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &PaperRecord {
        &self.records[index]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.position.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&PaperRecord> {
        self.position(id).map(|i| &self.records[i])
    }

    /// Indices of the records tagged `split`, in corpus order.
    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn count_in(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    /// Resets every tag to `split`.
    pub fn retag_all(&mut self, split: Split) {
        self.splits.iter_mut().for_each(|s| *s = split);
    }

    pub fn split_assignment(&self) -> SplitAssignment {
        let ids = |tag| {
            self.indices_in(tag)
                .into_iter()
                .map(|i| self.records[i].id.clone())
                .collect()
        };
        SplitAssignment {
            validation_ids: ids(Split::Validation),
            test_ids: ids(Split::Test),
        }
    }

    /// Applies a sidecar: listed ids get their tag, everything else becomes train.
    pub fn apply_split_assignment(&mut self, assignment: &SplitAssignment) -> Result<()> {
        let mut tags = vec![Split::Train; self.len()];
        for (ids, tag) in [
            (&assignment.validation_ids, Split::Validation),
            (&assignment.test_ids, Split::Test),
        ] {
            for id in ids {
                let i = self
                    .position(id)
                    .ok_or_else(|| Error::UnknownId(id.clone()))?;
                if tags[i] != Split::Train {
                    return Err(Error::InvalidArgument(format!(
                        "id `{id}` listed in more than one split"
                    )));
                }
                tags[i] = tag;
            }
        }
        self.splits = tags;
        Ok(())
    }
}

fn validate_record(rec: &PaperRecord, line: usize) -> Result<()> {
    if rec.id.is_empty() {
        return Err(Error::corpus(line, "id", "empty id"));
    }
    if !rec.score.is_finite() || !(0.0..=1.0).contains(&rec.score) {
        return Err(Error::corpus(
            line,
            "score",
            format!("{} outside [0, 1]", rec.score),
        ));
    }
    if let Some(raw) = &rec.raw_review_scores {
        let expected = aggregate_review_scores(raw)
            .map_err(|e| Error::corpus(line, "raw_review_scores", e.to_string()))?;
        if (expected - rec.score).abs() > AGGREGATE_TOLERANCE {
            return Err(Error::corpus(
                line,
                "score",
                format!("{} does not match aggregated reviews ({expected})", rec.score),
            ));
        }
    }
    Ok(())
}

/// Aggregates raw 1–10 review ratings into a score in `[0, 1]`.
///
/// Ratings further than [`REVIEW_OUTLIER_MARGIN`] from the mean are dropped
/// (one pass), the survivors are averaged and mapped by `(v - 1) / 9`.
pub fn aggregate_review_scores(raw: &[f64]) -> Result<f64> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("empty review score list".into()));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("review scores".into()));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let (sum, count) = raw
        .iter()
        .filter(|&&x| (x - mean).abs() <= REVIEW_OUTLIER_MARGIN)
        .fold((0.0, 0usize), |(s, c), &x| (s + x, c + 1));
    let kept = if count == 0 { mean } else { sum / count as f64 };
    Ok((kept - 1.0) / 9.0)
}

/// Reads a JSONL corpus; the first invalid line aborts ingestion.
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file), Split::Train)
}

/// Parses JSONL from any reader. Blank lines are skipped but still counted.
pub fn read_corpus(reader: impl BufRead, split: Split) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::corpus(line_no, "<line>", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::corpus(line_no, "<json>", e.to_string()))?;
        let published_at = NaiveDate::parse_from_str(&raw.published_at, "%Y-%m-%d")
            .map_err(|e| {
                Error::corpus(
                    line_no,
                    "published_at",
                    format!("`{}`: {e}", raw.published_at),
                )
            })?;
        let rec = PaperRecord {
            id: raw.id,
            title: raw.title,
            abstract_text: raw.abstract_text,
            topic_phrase: raw.topic_phrase,
            published_at,
            raw_review_scores: raw.raw_review_scores,
            score: raw.score,
        };
        validate_record(&rec, line_no)?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::corpus(line_no, "id", format!("duplicate id `{}`", rec.id)));
        }
        records.push(rec);
    }
    Corpus::from_records(records, split)
}

/// Serializes records as JSONL with a fixed field order.
pub fn write_corpus(corpus: &Corpus, writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let io = |e: std::io::Error| Error::io("<corpus>", e);
    for rec in corpus.records() {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::io("<corpus>", e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn persist_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(corpus, file)
}

/// Randomly retags `round_half_even(fraction * N)` of the non-test records as
/// validation; the rest become train. Pure in `(corpus, fraction, seed)`.
pub fn split_validation(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {fraction} not in (0, 1)"
        )));
    }
    let eligible: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus.splits[i] != Split::Test)
        .collect();
    let count = (fraction * eligible.len() as f64).round_ties_even() as usize;
    Ok(retag_random(corpus, eligible, count, Split::Validation, seed))
}

/// Holds out exactly `count` random records as the test split.
pub fn split_test(corpus: &Corpus, count: usize, seed: u64) -> Result<Corpus> {
    if count > corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {count} of {} records",
            corpus.len()
        )));
    }
    let all: Vec<usize> = (0..corpus.len()).collect();
    Ok(retag_random(corpus, all, count, Split::Test, seed))
}

fn retag_random(
    corpus: &Corpus,
    mut eligible: Vec<usize>,
    count: usize,
    tag: Split,
    seed: u64,
) -> Corpus {
    let mut out = corpus.clone();
    for &i in &eligible {
        out.splits[i] = Split::Train;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    for &i in &eligible[..count] {
        out.splits[i] = tag;
    }
    out
}

pub fn read_split_assignment(path: impl AsRef<Path>) -> Result<SplitAssignment> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

pub fn write_split_assignment(assignment: &SplitAssignment, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(assignment).expect("split sidecar serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(id: &str, score: f64) -> String {
        format!(
            r#"{{"id":"{id}","title":"T {id}","abstract":"A","published_at":"2023-05-01","score":{score}}}"#
        )
    }

    fn corpus_of(n: usize) -> Corpus {
        let text: String = (0..n).map(|i| line(&format!("p{i}"), 0.5) + "\n").collect();
        read_corpus(text.as_bytes(), Split::Train).unwrap()
    }

    #[test]
    fn ingests_valid_records() {
        let c = corpus_of(3);
        assert_eq!(c.len(), 3);
        assert_eq!(c.count_in(Split::Train), 3);
        assert_eq!(c.get("p1").unwrap().title, "T p1");
    }

    #[test]
    fn duplicate_id_names_line() {
        let text = format!("{}\n{}\n", line("a", 0.1), line("a", 0.2));
        let err = read_corpus(text.as_bytes(), Split::Train).unwrap_err();
        match err {
            Error::Corpus { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "id");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn score_out_of_range_rejected() {
        let text = format!("{}\n{}\n", line("a", 0.1), line("b", 1.5));
        let err = read_corpus(text.as_bytes(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Corpus { line: 2, ref field, .. } if field == "score"));
    }

    #[test]
    fn bad_date_and_bad_json_rejected() {
        let bad_date = r#"{"id":"a","title":"t","abstract":"x","published_at":"2023-13-01","score":0.2}"#;
        let err = read_corpus(bad_date.as_bytes(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Corpus { line: 1, ref field, .. } if field == "published_at"));

        let text = format!("{}\n{{not json\n", line("a", 0.1));
        let err = read_corpus(text.as_bytes(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Corpus { line: 2, .. }));
    }

    #[test]
    fn raw_reviews_must_match_score() {
        let ok = r#"{"id":"a","title":"t","abstract":"x","published_at":"2023-01-01","raw_review_scores":[8,8,2],"score":0.7777777777777778}"#;
        assert!(read_corpus(ok.as_bytes(), Split::Train).is_ok());
        let bad = r#"{"id":"a","title":"t","abstract":"x","published_at":"2023-01-01","raw_review_scores":[8,8,2],"score":0.5}"#;
        assert!(read_corpus(bad.as_bytes(), Split::Train).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert!((aggregate_review_scores(&[6.0, 6.0, 6.0]).unwrap() - 5.0 / 9.0).abs() < 1e-12);
        // mean 6, the 2 is 4 away and dropped
        assert!((aggregate_review_scores(&[8.0, 8.0, 2.0]).unwrap() - 7.0 / 9.0).abs() < 1e-12);
        assert!((aggregate_review_scores(&[5.0]).unwrap() - 4.0 / 9.0).abs() < 1e-12);
        assert!(aggregate_review_scores(&[]).is_err());
    }

    #[test]
    fn split_counts() {
        let c = corpus_of(100);
        let s = split_validation(&c, 0.1, 7).unwrap();
        assert_eq!(s.count_in(Split::Validation), 10);
        assert_eq!(s.count_in(Split::Train), 90);
        let again = split_validation(&c, 0.1, 7).unwrap();
        assert_eq!(s.splits(), again.splits());
        let other = split_validation(&c, 0.1, 8).unwrap();
        assert_ne!(s.splits(), other.splits());
        assert!(split_validation(&c, 0.0, 1).is_err());
        assert!(split_validation(&c, 1.0, 1).is_err());
    }

    #[test]
    fn split_rounding_matches_hand_value() {
        // 0.1 * 11118 = 1111.8 rounds to 1112
        let c = corpus_of(11_118);
        let s = split_validation(&c, 0.1, 0).unwrap();
        assert_eq!(s.count_in(Split::Validation), 1112);
    }

    #[test]
    fn validation_split_leaves_test_alone() {
        let c = split_test(&corpus_of(50), 10, 3).unwrap();
        let s = split_validation(&c, 0.5, 3).unwrap();
        assert_eq!(s.count_in(Split::Test), 10);
        assert_eq!(s.count_in(Split::Validation), 20);
        assert_eq!(s.indices_in(Split::Test), c.indices_in(Split::Test));
    }

    #[test]
    fn sidecar_roundtrip() {
        let c = split_validation(&split_test(&corpus_of(30), 5, 1).unwrap(), 0.2, 2).unwrap();
        let sidecar = c.split_assignment();
        let json = serde_json::to_string(&sidecar).unwrap();
        assert!(json.starts_with(r#"{"validation_ids":["#));
        let mut fresh = corpus_of(30);
        fresh.apply_split_assignment(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(fresh.splits(), c.splits());
    }

    fn arb_record() -> impl Strategy<Value = PaperRecord> {
        (
            "[a-z0-9]{1,8}",
            "\\PC{0,20}",
            "\\PC{0,40}",
            proptest::option::of("[a-z ]{1,12}"),
            0i64..20_000,
            proptest::option::of(proptest::collection::vec(1u8..=10, 1..6)),
            0.0f64..=1.0,
        )
            .prop_map(|(id, title, abstract_text, topic_phrase, day, raw, score)| {
                let raw_review_scores =
                    raw.map(|v| v.into_iter().map(f64::from).collect::<Vec<_>>());
                let score = match &raw_review_scores {
                    Some(r) => aggregate_review_scores(r).unwrap(),
                    None => score,
                };
                PaperRecord {
                    id,
                    title,
                    abstract_text,
                    topic_phrase,
                    published_at: NaiveDate::from_ymd_opt(1990, 1, 1).unwrap()
                        + chrono::Days::new(day as u64),
                    raw_review_scores,
                    score,
                }
            })
    }

    proptest! {
        #[test]
        fn persist_ingest_is_byte_stable(recs in proptest::collection::vec(arb_record(), 0..12)) {
            let mut seen = HashSet::new();
            let recs: Vec<_> = recs.into_iter().filter(|r| seen.insert(r.id.clone())).collect();
            let corpus = Corpus::from_records(recs, Split::Train).unwrap();
            let mut first = Vec::new();
            write_corpus(&corpus, &mut first).unwrap();
            let back = read_corpus(first.as_slice(), Split::Train).unwrap();
            prop_assert_eq!(back.records(), corpus.records());
            let mut second = Vec::new();
            write_corpus(&back, &mut second).unwrap();
            prop_assert_eq!(first, second);
        }

        #[test]
        fn aggregate_is_permutation_invariant(mut raw in proptest::collection::vec(1u8..=10, 1..9), seed in any::<u64>()) {
            let raw_f: Vec<f64> = raw.iter().map(|&x| f64::from(x)).collect();
            let a = aggregate_review_scores(&raw_f).unwrap();
            raw.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<f64> = raw.iter().map(|&x| f64::from(x)).collect();
            let b = aggregate_review_scores(&shuffled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
