//! Progressive listwise ranking for paper corpora.
//!
//! The pipeline: ingest a corpus ([`corpus`]), attach topic embeddings and
//! retrieve date-adjacent related papers ([`retrieval`]), score each paper
//! with a multi-step latent refinement model ([`model`]) trained under
//! temperature-annealed ranking losses ([`losses`], [`trainer`]), and
//! evaluate or rank with [`metrics`] and [`output`].
//!
//! Data-parallel loops run on rayon when the default `parallel` feature is
//! enabled; see [`exec`].

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod output;
pub mod retrieval;
pub mod synthetic;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use corpus::{Corpus, PaperRecord, Split};
pub use embeddings::EmbeddingMatrix;
pub use error::{Error, Result};
pub use exec::Execution;
pub use losses::{BatchScores, LossKind, TemperaturePlan};
pub use metrics::RankingEval;
pub use model::{ModelParams, ModelShape, RefinementTrace};
pub use retrieval::{EmbeddingIndex, ReferenceSet, RetrievalParams};
pub use trainer::{ScoringContext, TrainRun, Trainer};
