//! Embedding file pairs: a JSON header plus a raw little-endian f32 matrix.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub dim: usize,
    pub count: usize,
    pub dtype: String,
    pub order: String,
    pub ids: Vec<String>,
}

/// Row-major `count × dim` matrix with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Embedding("dim must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Embedding(format!(
                "{} values for {} rows of dim {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Embedding(format!("duplicate id `{dup}`")));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Embedding(format!(
                "non-finite value in row `{}`",
                ids[pos / dim]
            )));
        }
        Ok(EmbeddingMatrix { dim, ids, data })
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

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn header(&self) -> EmbeddingHeader {
        EmbeddingHeader {
            dim: self.dim,
            count: self.ids.len(),
            dtype: "f32".into(),
            order: "row-major".into(),
            ids: self.ids.clone(),
        }
    }

    /// Reads `<stem>.json` + `<stem>.bin`.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (json, bin) = pair_paths(path.as_ref());
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let header: EmbeddingHeader = serde_json::from_str(&text)
            .map_err(|e| Error::Embedding(format!("{}: {e}", json.display())))?;
        if header.dtype != "f32" {
            return Err(Error::Embedding(format!("unsupported dtype `{}`", header.dtype)));
        }
        if header.order != "row-major" {
            return Err(Error::Embedding(format!("unsupported order `{}`", header.order)));
        }
        if header.count != header.ids.len() {
            return Err(Error::Embedding(format!(
                "header count {} but {} ids",
                header.count,
                header.ids.len()
            )));
        }
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let expected = header.count * header.dim * 4;
        if bytes.len() != expected {
            return Err(Error::Embedding(format!(
                "{}: {} bytes, expected {expected}",
                bin.display(),
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        EmbeddingMatrix::new(header.dim, header.ids, data)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let (json, bin) = pair_paths(path.as_ref());
        let mut text = serde_json::to_string(&self.header()).expect("header serializes");
        text.push('\n');
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let bytes: Vec<u8> = self.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
    }
}

/// Maps `x`, `x.json` or `x.bin` to the `(x.json, x.bin)` pair.
pub fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".json")
        .or_else(|| s.strip_suffix(".bin"))
        .unwrap_or(&s);
    (
        PathBuf::from(format!("{stem}.json")),
        PathBuf::from(format!("{stem}.bin")),
    )
}
