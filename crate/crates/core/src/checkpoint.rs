//! Checkpoint file pair: `<stem>.json` header plus `<stem>.bin` parameters.
//!
//! The blob holds every parameter as a little-endian `f32`, blocks laid out
//! in the order listed under `param_order` in the header (each block
//! row-major). Trainers quantize checkpoint parameters to `f32` before
//! evaluating them, so saving and loading is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::embeddings::pair_paths;
use crate::error::{Error, Result};
use crate::metrics::RankingEval;
use crate::model::{ModelParams, ModelShape};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Epochs completed when the snapshot was taken (0 = initialization).
    pub epoch: usize,
    pub validation_eval: Option<RankingEval>,
    pub config: TrainConfig,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub steps: usize,
    pub scorer_layers: usize,
    pub seed: u64,
    pub epoch: usize,
    pub config_digest: String,
    pub dtype: String,
    pub param_count: usize,
    pub param_order: Vec<BlockEntry>,
    pub config: TrainConfig,
    pub validation_eval: Option<RankingEval>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, epoch: usize, validation_eval: Option<RankingEval>, config: &TrainConfig) -> Self {
        Checkpoint {
            params,
            epoch,
            validation_eval,
            config_digest: config.digest(),
            config: config.clone(),
        }
    }

    pub fn header(&self) -> CheckpointHeader {
        let shape = *self.params.shape();
        let param_order = self
            .params
            .layout()
            .blocks(&shape)
            .into_iter()
            .map(|(name, shape, _)| BlockEntry {
                name: name.to_string(),
                shape,
            })
            .collect();
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            input_dim: shape.input_dim,
            hidden_dim: shape.hidden_dim,
            steps: shape.steps,
            scorer_layers: shape.scorer_layers,
            seed: self.config.seed,
            epoch: self.epoch,
            config_digest: self.config_digest.clone(),
            dtype: "f32".into(),
            param_count: self.params.len(),
            param_order,
            config: self.config.clone(),
            validation_eval: self.validation_eval.clone(),
        }
    }

    pub fn blob(&self) -> Vec<u8> {
        self.params
            .as_slice()
            .iter()
            .flat_map(|&x| (x as f32).to_le_bytes())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (json, bin) = pair_paths(path.as_ref());
        let mut text = serde_json::to_string_pretty(&self.header()).expect("header serializes");
        text.push('\n');
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        fs::write(&bin, self.blob()).map_err(|e| Error::io(&bin, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (json, bin) = pair_paths(path.as_ref());
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let header: CheckpointHeader =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", json.display())))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        if header.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype `{}`", header.dtype)));
        }
        if header.config.digest() != header.config_digest {
            return Err(Error::Checkpoint("config digest does not match embedded config".into()));
        }
        let shape = ModelShape {
            input_dim: header.input_dim,
            hidden_dim: header.hidden_dim,
            steps: header.steps,
            scorer_layers: header.scorer_layers,
        };
        if header.config.m != shape.steps
            || header.config.hidden_dim != shape.hidden_dim
            || header.config.scorer_layers != shape.scorer_layers
        {
            return Err(Error::Checkpoint("model shape disagrees with config".into()));
        }
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != header.param_count * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: {} bytes for {} parameters",
                bin.display(),
                bytes.len(),
                header.param_count
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let params = ModelParams::from_vec(shape, data)?;
        let ckpt = Checkpoint {
            params,
            epoch: header.epoch,
            validation_eval: header.validation_eval.clone(),
            config: header.config.clone(),
            config_digest: header.config_digest.clone(),
        };
        if ckpt.header() != header {
            return Err(Error::Checkpoint("header does not match parameter layout".into()));
        }
        Ok(ckpt)
    }
}
