use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{self, Container, Tensor};
use crate::error::{CciError, Result};

/// Tensor name holding the `[entries, dim]` matrix in the binary bank format.
pub const BANK_TENSOR: &str = "embeddings";
/// Metadata key holding the JSON-encoded label list in the binary bank format.
pub const BANK_LABELS_KEY: &str = "labels";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub label: String,
    pub vector: Vec<f32>,
}

/// Precomputed text embeddings, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingBank {
    dim: usize,
    entries: Vec<BankEntry>,
    normalized: bool,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    dim: usize,
    entries: Vec<BankEntry>,
}

impl TextEmbeddingBank {
    pub fn new(dim: usize, entries: Vec<BankEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for entry in &entries {
            if entry.vector.len() != dim {
                return Err(CciError::dim(
                    dim,
                    entry.vector.len(),
                    format!("text bank entry `{}`", entry.label),
                ));
            }
            if entry.vector.iter().any(|v| !v.is_finite()) {
                return Err(CciError::NonFinite("text bank vector"));
            }
            if !seen.insert(entry.label.as_str()) {
                return Err(CciError::DuplicateLabel(entry.label.clone()));
            }
        }
        Ok(Self {
            dim,
            entries,
            normalized: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.label.as_str())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.label == label)
    }

    pub fn vector(&self, label: &str) -> Option<&[f32]> {
        self.entries
            .iter()
            .find(|e| e.label == label)
            .map(|e| e.vector.as_slice())
    }

    /// Scales every vector to unit L2 norm.
    pub fn normalize(mut self) -> Result<Self> {
        for entry in &mut self.entries {
            let norm = entry
                .vector
                .iter()
                .map(|v| f64::from(*v) * f64::from(*v))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(CciError::ZeroNorm);
            }
            for v in &mut entry.vector {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(&BankFile {
            dim: self.dim,
            entries: self.entries.clone(),
        })?)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::default();
        let data = self
            .entries
            .iter()
            .flat_map(|e| e.vector.iter().copied())
            .collect();
        c.tensors.insert(
            BANK_TENSOR.into(),
            Tensor::new(vec![self.entries.len(), self.dim], data)?,
        );
        let labels: Vec<&str> = self.labels().collect();
        c.metadata
            .insert(BANK_LABELS_KEY.into(), serde_json::to_string(&labels)?);
        Ok(c)
    }

    fn from_container(c: Container) -> Result<Self> {
        let tensor = c
            .tensors
            .get(BANK_TENSOR)
            .ok_or_else(|| CciError::MissingTensor(BANK_TENSOR.into()))?;
        if tensor.shape.len() != 2 {
            return Err(CciError::Container(format!(
                "`{BANK_TENSOR}` must be 2-D, found {:?}",
                tensor.shape
            )));
        }
        let labels: Vec<String> = match c.metadata.get(BANK_LABELS_KEY) {
            Some(raw) => serde_json::from_str(raw)?,
            None => {
                return Err(CciError::Container(format!(
                    "missing `{BANK_LABELS_KEY}` metadata"
                )))
            }
        };
        let (n, dim) = (tensor.shape[0], tensor.shape[1]);
        if labels.len() != n {
            return Err(CciError::dim(n, labels.len(), "bank label count"));
        }
        let entries = labels
            .into_iter()
            .zip(tensor.data.chunks_exact(dim.max(1)))
            .map(|(label, v)| BankEntry {
                label,
                vector: v.to_vec(),
            })
            .collect();
        Self::new(dim, entries)
    }
}

/// Loads a bank from JSON (`{"dim", "entries": [{"label", "vector"}]}`) or,
/// for any other extension, from a named-tensor container.
pub fn load_text_bank(
    path: &Path,
    expected_dim: Option<usize>,
    normalize: bool,
) -> Result<TextEmbeddingBank> {
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let bank = if is_json {
        let bytes = std::fs::read(path).map_err(|e| CciError::io(path, e))?;
        let file: BankFile = serde_json::from_slice(&bytes)?;
        TextEmbeddingBank::new(file.dim, file.entries)?
    } else {
        let (c, _) = container::read(path)?;
        TextEmbeddingBank::from_container(c)?
    };
    if let Some(d) = expected_dim {
        if bank.dim != d {
            return Err(CciError::dim(d, bank.dim, "text bank dimension"));
        }
    }
    if normalize {
        bank.normalize()
    } else {
        Ok(bank)
    }
}
