use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Features with clean and observed (possibly corrupted) labels.
///
/// `noise_mask[i]` is always `clean_labels[i] != noisy_labels[i]`; the mask is
/// ground truth for diagnostics and never reaches the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    clean_labels: Vec<usize>,
    noisy_labels: Vec<usize>,
    noise_mask: Vec<bool>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    /// A dataset whose observed labels equal the clean ones.
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Alignment(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        check_label_range(&labels, num_classes)?;
        let n = labels.len();
        Ok(Dataset {
            features,
            noisy_labels: labels.clone(),
            clean_labels: labels,
            noise_mask: vec![false; n],
            num_classes,
            split,
        })
    }

    /// Replaces the observed labels and recomputes the noise mask.
    pub fn with_noisy_labels(mut self, noisy: Vec<usize>) -> Result<Self> {
        if noisy.len() != self.len() {
            return Err(Error::Alignment(format!(
                "{} noisy labels for {} samples",
                noisy.len(),
                self.len()
            )));
        }
        check_label_range(&noisy, self.num_classes)?;
        let mask: Vec<bool> = noisy
            .iter()
            .zip(&self.clean_labels)
            .map(|(a, b)| a != b)
            .collect();
        if self.split == Split::Test && mask.iter().any(|&m| m) {
            return Err(Error::config("test split cannot carry label noise"));
        }
        self.noisy_labels = noisy;
        self.noise_mask = mask;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn clean_labels(&self) -> &[usize] {
        &self.clean_labels
    }

    /// Labels the clients train on.
    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    pub fn noise_mask(&self) -> &[bool] {
        &self.noise_mask
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn has_noise(&self) -> bool {
        self.noise_mask.iter().any(|&m| m)
    }

    /// Fraction of samples whose observed label differs from the clean one.
    pub fn noise_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.noise_mask.iter().filter(|&&m| m).count() as f64 / self.len() as f64
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.clean_labels[i]] += 1;
        }
        h
    }
}

fn check_label_range(labels: &[usize], num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::config("datasets need at least two classes"));
    }
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(bad) => Err(Error::config(format!(
            "label {bad} out of range for {num_classes} classes"
        ))),
        None => Ok(()),
    }
}
