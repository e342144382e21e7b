//! Training configuration and its flat `key = value` file format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossKind, TemperaturePlan, DEFAULT_TAU_MAX, DEFAULT_TAU_MIN};
use crate::model::{DEFAULT_HIDDEN_DIM, DEFAULT_STEPS};
use crate::retrieval::{RetrievalParams, DEFAULT_GAMMA, DEFAULT_K};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Refinement steps.
    pub m: usize,
    /// References per paper.
    pub k: usize,
    /// Batch size.
    pub batch: usize,
    pub gamma: f64,
    pub past_only: bool,
    pub tau_min: f64,
    pub tau_max: f64,
    pub lr: f64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    /// Global gradient-norm clip, off when absent.
    pub clip: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub scorer_layers: usize,
    pub validation_fraction: f64,
    pub selection_metric: String,
    /// Classical untempered ListMLE instead of the annealed form.
    pub raw_listmle: bool,
    /// Sequential gradient accumulation; bit-identical across runs.
    pub reproducible: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::ListMle,
            m: DEFAULT_STEPS,
            k: DEFAULT_K,
            batch: 16,
            gamma: DEFAULT_GAMMA,
            past_only: false,
            tau_min: DEFAULT_TAU_MIN,
            tau_max: DEFAULT_TAU_MAX,
            lr: 5.0e-5,
            momentum: 0.0,
            clip: None,
            epochs: 5,
            seed: 0,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            scorer_layers: 1,
            validation_fraction: 0.1,
            selection_metric: "ndcg@10".into(),
            raw_listmle: false,
            reproducible: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.m == 0 || self.k == 0 || self.epochs == 0 || self.hidden_dim == 0 {
            return fail("m, k, epochs and hidden_dim must be positive".into());
        }
        let min_batch = if self.loss.is_ranking() { 2 } else { 1 };
        if self.batch < min_batch {
            return fail(format!("{} needs batch >= {min_batch}", self.loss));
        }
        if !(self.gamma.is_finite() && (-1.0..=1.0).contains(&self.gamma)) {
            return fail(format!("gamma {} outside [-1, 1]", self.gamma));
        }
        TemperaturePlan::new(self.tau_min, self.tau_max, self.m)?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("learning rate {} must be >= 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if let Some(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return fail(format!("clip {c} must be positive"));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            ));
        }
        if !matches!(self.scorer_layers, 1 | 2) {
            return fail(format!("scorer_layers {} must be 1 or 2", self.scorer_layers));
        }
        let probe = crate::metrics::RankingEval {
            n: 0,
            ndcg: Default::default(),
            spearman: None,
            kendall: 0.0,
        };
        probe.metric(&self.selection_metric)?;
        Ok(())
    }

    pub fn plan(&self) -> Result<TemperaturePlan> {
        TemperaturePlan::new(self.tau_min, self.tau_max, self.m)
    }

    pub fn retrieval(&self) -> RetrievalParams {
        RetrievalParams {
            gamma: self.gamma,
            k: self.k,
            past_only: self.past_only,
        }
    }

    /// Parses a flat `key = value` file; absent keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_file_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
