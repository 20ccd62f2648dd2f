//! Labelled datasets: generation, ingestion, splitting and normalisation.

mod idx;
mod split;
mod synthetic;
mod tabular;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use idx::{load_idx_images, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use split::{checksum, split, DatasetMeta, SplitSpec, Splits, Standardizer};
pub use synthetic::{generate_synthetic, Covariance, SyntheticSpec};
pub use tabular::{load_csv, save_csv};

/// Stable identifier of a sample, preserved across splits and subsets.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u64> for SampleId {
    fn from(v: u64) -> Self {
        SampleId(v)
    }
}

/// A labelled dataset with row-major features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    input_dim: usize,
    num_classes: usize,
    ids: Vec<SampleId>,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset, checking that ids are unique, labels are below
    /// `num_classes`, and every feature is finite.
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        num_classes: usize,
        ids: Vec<SampleId>,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::validation(
                "input_dim and num_classes must be positive",
            ));
        }
        if ids.len() != labels.len() || features.len() != labels.len() * input_dim {
            return Err(Error::dimension(format!(
                "{} ids, {} labels and {} feature values do not describe {}-dimensional rows",
                ids.len(),
                labels.len(),
                features.len(),
                input_dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::validation(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite feature in row {}",
                pos / input_dim
            )));
        }
        let unique: BTreeSet<_> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::validation("duplicate sample ids"));
        }
        Ok(Self {
            name: name.into(),
            input_dim,
            num_classes,
            ids,
            features,
            labels,
        })
    }

    /// Rows with ids `0..n`.
    pub fn from_rows(
        name: impl Into<String>,
        num_classes: usize,
        rows: &[Vec<f64>],
        labels: Vec<usize>,
    ) -> Result<Self> {
        let input_dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != input_dim) {
            return Err(Error::dimension("ragged rows"));
        }
        let ids = (0..rows.len() as u64).map(SampleId).collect();
        Self::new(name, input_dim, num_classes, ids, rows.concat(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn id(&self, i: usize) -> SampleId {
        self.ids[i]
    }

    /// Row `i` as a rank-1 tensor.
    pub fn tensor(&self, i: usize) -> Tensor {
        Tensor::vector(self.row(i).to_vec()).expect("dataset rows are finite")
    }

    pub fn position(&self, id: SampleId) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// The rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            name: self.name.clone(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenates two datasets with the same layout.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.input_dim != other.input_dim || self.num_classes != other.num_classes {
            return Err(Error::dimension("datasets have different layouts"));
        }
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(
            self.name.clone(),
            self.input_dim,
            self.num_classes,
            ids,
            features,
            labels,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The same rows with `labels` in place of the current ones.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(Error::dimension(format!(
                "{} labels for {} rows",
                labels.len(),
                self.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::validation(format!(
                "label {bad} outside 0..{}",
                self.num_classes
            )));
        }
        Ok(Dataset {
            labels,
            ..self.clone()
        })
    }

    pub(crate) fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }
}
