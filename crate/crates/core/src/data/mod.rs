//! Datasets, client partitioning and poisoned-set construction.

mod idx;
mod partition;
mod poison;
mod synth;

pub use idx::{load_idx, load_mnist_dir, read_idx_images, read_idx_labels};
pub use partition::{partition_noniid, PartitionPlan};
pub use poison::{build_poisoned_dataset, edge_case_pool, PoisonKind, PoisonSpec, TriggerPatch};
pub use synth::{synth_dataset, synth_dataset_with_separation, DEFAULT_SEPARATION};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Matrix;

/// Labelled samples; features are one row per sample laid out as a
/// `height × width` image (synthetic vectors use height 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    height: usize,
    width: usize,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        (height, width): (usize, usize),
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            ));
        }
        if height * width != features.cols() {
            return invalid(format!(
                "image shape {height}x{width} does not match {} features",
                features.cols()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return invalid(format!("label {bad} outside [0, {num_classes})"));
        }
        if features.as_slice().iter().any(|v| !v.is_finite()) {
            return invalid("non-finite feature value");
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            height: self.height,
            width: self.width,
        }
    }

    /// Indices of samples carrying `label`, in order.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Appends the samples of `other` (same shape) after this dataset's samples.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if other.dim() != self.dim() || other.num_classes != self.num_classes {
            return invalid("cannot concatenate datasets of different shape");
        }
        let mut data = self.features.as_slice().to_vec();
        data.extend_from_slice(other.features.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(
            Matrix::from_vec(labels.len(), self.dim(), data)?,
            labels,
            self.num_classes,
            (self.height, self.width),
        )
    }

    /// Same features, every label replaced by `label`.
    pub fn relabeled(&self, label: usize) -> Result<Dataset> {
        if label >= self.num_classes {
            return invalid(format!("label {label} outside [0, {})", self.num_classes));
        }
        let mut out = self.clone();
        out.labels.iter_mut().for_each(|l| *l = label);
        Ok(out)
    }

    /// Applies `f` to every sample's feature row.
    pub fn map_features(&self, mut f: impl FnMut(&mut [f64])) -> Dataset {
        let mut out = self.clone();
        for r in 0..out.len() {
            f(out.features.row_mut(r));
        }
        out
    }
}
