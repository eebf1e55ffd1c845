use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numcore::{l2_norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    File,
    Synthetic,
    RandomModel,
}

/// Frozen SSL representations, one unit-norm row per dataset sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    embeddings: Matrix,
    source: EmbeddingSource,
    zero_rows: Vec<usize>,
}

impl EmbeddingStore {
    /// Normalizes every row of `raw`. All-zero rows are kept and recorded in
    /// [`EmbeddingStore::zero_rows`].
    pub fn from_raw(raw: Matrix, source: EmbeddingSource) -> Result<Self> {
        if !raw.is_finite() {
            return Err(Error::config("embeddings contain non-finite values"));
        }
        let zero_rows = raw
            .row_iter()
            .enumerate()
            .filter(|(_, r)| l2_norm(r) == 0.0)
            .map(|(i, _)| i)
            .collect();
        Ok(EmbeddingStore {
            embeddings: raw.normalize_rows(),
            source,
            zero_rows,
        })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn zero_rows(&self) -> &[usize] {
        &self.zero_rows
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn check_aligned(&self, dataset: &Dataset) -> Result<()> {
        if self.len() != dataset.len() {
            return Err(Error::Alignment(format!(
                "{} embedding rows for {} samples",
                self.len(),
                dataset.len()
            )));
        }
        Ok(())
    }
}
