//! Ranked listings, recommendation digests and markdown reports.

use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::RankingEval;
use crate::trainer::ScoringContext;

/// Default digest length.
pub const DEFAULT_RECOMMENDATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub id: String,
    pub predicted_score: f64,
    pub rank: usize,
}

/// Orders papers by descending score, ties by ascending id.
pub fn rank_papers(corpus: &Corpus, scores: &[f64]) -> Result<Vec<RankRow>> {
    if scores.len() != corpus.len() {
        return Err(Error::DimMismatch {
            expected: corpus.len(),
            got: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| corpus.record(a).id.cmp(&corpus.record(b).id))
    });
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(pos, i)| RankRow {
            id: corpus.record(i).id.clone(),
            predicted_score: scores[i],
            rank: pos + 1,
        })
        .collect())
}

pub fn rank_csv(rows: &[RankRow]) -> String {
    let mut s = String::from("id,predicted_score,rank\n");
    for r in rows {
        writeln!(s, "{},{},{}", csv_field(&r.id), r.predicted_score, r.rank).unwrap();
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigestEntry {
    pub rank: usize,
    pub id: String,
    pub title: String,
    pub predicted_score: f64,
    pub reference_ids: Vec<String>,
}

/// The top papers of a corpus with their reference sets attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationDigest {
    pub generated_at: NaiveDate,
    pub entries: Vec<DigestEntry>,
}

impl RecommendationDigest {
    pub fn build(
        corpus: &Corpus,
        context: &ScoringContext,
        scores: &[f64],
        n: usize,
        generated_at: NaiveDate,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("digest length must be positive".into()));
        }
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("empty corpus".into()));
        }
        let entries = rank_papers(corpus, scores)?
            .into_iter()
            .take(n)
            .map(|row| {
                let i = corpus.position(&row.id).expect("ranked id is in the corpus");
                DigestEntry {
                    rank: row.rank,
                    title: corpus.record(i).title.clone(),
                    reference_ids: context
                        .references(i)
                        .references
                        .iter()
                        .map(|r| r.id.clone())
                        .collect(),
                    id: row.id,
                    predicted_score: row.predicted_score,
                }
            })
            .collect();
        Ok(RecommendationDigest {
            generated_at,
            entries,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("digest serializes");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# Recommended papers ({})\n", self.generated_at).unwrap();
        writeln!(s, "| Rank | Id | Title | Score | References |").unwrap();
        writeln!(s, "|---:|---|---|---:|---|").unwrap();
        for e in &self.entries {
            writeln!(
                s,
                "| {} | {} | {} | {:.4} | {} |",
                e.rank,
                md_escape(&e.id),
                md_escape(&e.title),
                e.predicted_score,
                md_escape(&e.reference_ids.join(", "))
            )
            .unwrap();
        }
        s
    }
}

fn md_escape(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

fn parse_csv(name: &str, text: &str, expected_header: &str) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv(format!("{name}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != expected_header {
        return Err(Error::Csv(format!(
            "{name}: header `{}`, expected `{expected_header}`",
            header.join(",")
        )));
    }
    let rows = reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| Error::Csv(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<Vec<String>>>>()?;
    if rows.is_empty() {
        return Err(Error::Csv(format!("{name}: no data rows")));
    }
    Ok(rows)
}

fn md_table(s: &mut String, header: &[&str], rows: &[Vec<String>]) {
    writeln!(s, "| {} |", header.join(" | ")).unwrap();
    writeln!(s, "|{}", "---|".repeat(header.len())).unwrap();
    for row in rows {
        writeln!(s, "| {} |", row.join(" | ")).unwrap();
    }
}

/// Builds a markdown report from named evaluation and step-diagnostic CSVs.
/// Cell values are copied verbatim.
pub fn build_report(evals: &[(String, String)], steps: &[(String, String)]) -> Result<String> {
    if evals.is_empty() && steps.is_empty() {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    let mut s = String::from("# Evaluation report\n");
    if !evals.is_empty() {
        s.push_str("\n## Ranking metrics\n\n");
        let mut rows = Vec::new();
        for (name, text) in evals {
            for mut row in parse_csv(name, text, RankingEval::CSV_HEADER)? {
                row.insert(0, name.clone());
                rows.push(row);
            }
        }
        let mut header = vec!["source"];
        header.extend(RankingEval::CSV_HEADER.split(','));
        md_table(&mut s, &header, &rows);
    }
    for (name, text) in steps {
        writeln!(s, "\n## NDCG@10 by refinement step: {name}\n").unwrap();
        let rows = parse_csv(name, text, "step,ndcg@10")?;
        md_table(&mut s, &["step", "ndcg@10"], &rows);
    }
    Ok(s)
}
