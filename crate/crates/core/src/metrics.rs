//! Evaluation, clean/noisy diagnostics and report records.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{io, Dataset};
use crate::error::{Error, Result};
use crate::losses::{ce_per_sample, logit_gradient, LossConfig};
use crate::model::ModelParams;
use crate::numcore::{l2_norm, Matrix};

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("accuracy of an empty set"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::shape("accuracy", "one label per row"));
    }
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// `matrix[true][predicted]`.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut cm = vec![vec![0; num_classes]; num_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        cm[y][p] += 1;
    }
    cm
}

/// Unweighted mean of per-class F1 over all `num_classes` classes. A class
/// that appears in neither predictions nor labels scores 0.
pub fn macro_f1(logits: &Matrix, labels: &[usize], num_classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("macro-F1 of an empty set"));
    }
    if logits.rows() != labels.len() || logits.cols() != num_classes {
        return Err(Error::shape("macro_f1", "logits must be n × num_classes"));
    }
    let cm = confusion_matrix(&logits.argmax_rows(), labels, num_classes);
    let total: f64 = (0..num_classes)
        .map(|c| {
            let tp = cm[c][c];
            let fp: usize = (0..num_classes).filter(|&r| r != c).map(|r| cm[r][c]).sum();
            let fn_: usize = (0..num_classes).filter(|&p| p != c).map(|p| cm[c][p]).sum();
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / num_classes as f64)
}

/// Means over the clean and the noisy samples of a probe set. A group with no
/// members is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupMeans {
    pub clean: Option<f64>,
    pub noisy: Option<f64>,
}

impl GroupMeans {
    fn from_values(values: &[f64], mask: impl Iterator<Item = bool>) -> Self {
        let (mut cs, mut cn, mut ns, mut nn) = (0.0, 0usize, 0.0, 0usize);
        for (&v, noisy) in values.iter().zip(mask) {
            if noisy {
                ns += v;
                nn += 1;
            } else {
                cs += v;
                cn += 1;
            }
        }
        GroupMeans {
            clean: (cn > 0).then(|| cs / cn as f64),
            noisy: (nn > 0).then(|| ns / nn as f64),
        }
    }
}

/// Where the per-sample gradient magnitude is read off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientSite {
    /// `‖∂L/∂logits‖` of each sample.
    Logits,
    /// `‖∂L/∂z‖` where `z` is the representation entering the head, i.e. the
    /// logit gradient pulled back through the head weights.
    Representation,
}

/// Mean cross-entropy against the observed labels, split by the noise mask.
pub fn groupwise_ce(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<GroupMeans> {
    if indices.is_empty() {
        return Ok(GroupMeans::default());
    }
    let x = dataset.features().select_rows(indices);
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.noisy_labels()[i]).collect();
    let logits = params.forward(&x)?.logits;
    let ce = ce_per_sample(&logits, &labels)?;
    Ok(GroupMeans::from_values(
        &ce,
        indices.iter().map(|&i| dataset.noise_mask()[i]),
    ))
}

/// Per-sample gradient norms of the configured loss's logit-dependent part.
pub fn per_sample_gradnorms(
    params: &ModelParams,
    x: &Matrix,
    labels: &[usize],
    loss: &LossConfig,
    site: GradientSite,
) -> Result<Vec<f64>> {
    let logits = params.forward(x)?.logits;
    gradnorms_from_logits(params, &logits, labels, loss, site)
}

fn gradnorms_from_logits(
    params: &ModelParams,
    logits: &Matrix,
    labels: &[usize],
    loss: &LossConfig,
    site: GradientSite,
) -> Result<Vec<f64>> {
    // The loss gradient is a batch mean; scale back to per-sample terms.
    let grad = logit_gradient(logits, labels, loss)?.scale(labels.len() as f64);
    let grad = match site {
        GradientSite::Logits => grad,
        GradientSite::Representation => {
            let slot = params.spec().layers()[params.spec().hidden_dims.len()];
            let w = Matrix::from_vec(
                slot.fan_in,
                slot.fan_out,
                params.flatten()[slot.weights()].to_vec(),
            )?;
            grad.matmul_t(&w)?
        }
    };
    Ok(grad.row_iter().map(l2_norm).collect())
}

/// Mean per-sample gradient magnitude, split by the noise mask.
pub fn groupwise_gradnorm(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    loss: &LossConfig,
    site: GradientSite,
) -> Result<GroupMeans> {
    if indices.is_empty() {
        return Ok(GroupMeans::default());
    }
    let x = dataset.features().select_rows(indices);
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.noisy_labels()[i]).collect();
    let norms = per_sample_gradnorms(params, &x, &labels, loss, site)?;
    Ok(GroupMeans::from_values(
        &norms,
        indices.iter().map(|&i| dataset.noise_mask()[i]),
    ))
}

/// Groupwise CE and both gradient magnitudes from a single forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProbeDiagnostics {
    pub ce: GroupMeans,
    pub grad_norm: GroupMeans,
    pub repr_grad_norm: GroupMeans,
}

pub fn probe_diagnostics(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    loss: &LossConfig,
) -> Result<ProbeDiagnostics> {
    if indices.is_empty() {
        return Ok(ProbeDiagnostics::default());
    }
    let x = dataset.features().select_rows(indices);
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.noisy_labels()[i]).collect();
    let logits = params.forward(&x)?.logits;
    let group = |v: &[f64]| GroupMeans::from_values(v, indices.iter().map(|&i| dataset.noise_mask()[i]));
    Ok(ProbeDiagnostics {
        ce: group(&ce_per_sample(&logits, &labels)?),
        grad_norm: group(&gradnorms_from_logits(params, &logits, &labels, loss, GradientSite::Logits)?),
        repr_grad_norm: group(&gradnorms_from_logits(
            params,
            &logits,
            &labels,
            loss,
            GradientSite::Representation,
        )?),
    })
}

/// Writes `g(x)` for every sample of `dataset` as an `FSKE` file.
pub fn dump_representations(params: &ModelParams, dataset: &Dataset, path: impl AsRef<Path>) -> Result<Matrix> {
    let features = params.forward(dataset.features())?.features;
    io::write_matrix(path, &features)?;
    Ok(features)
}

/// Metrics of one communication round. Round 0 describes the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_macro_f1: f64,
    pub selected_clients: Vec<usize>,
    /// Mean training loss over every local batch of the round.
    pub train_loss: Option<f64>,
    pub train_ce: Option<f64>,
    pub train_contrastive: Option<f64>,
    /// Cross-entropy of the global model on the probe set.
    pub ce: GroupMeans,
    /// Logit-gradient magnitude on the probe set.
    pub grad_norm: GroupMeans,
    /// Representation-gradient magnitude on the probe set.
    pub repr_grad_norm: GroupMeans,
}

/// Closing record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_accuracy: f64,
    pub best_accuracy_round: usize,
    pub best_macro_f1: f64,
    pub best_macro_f1_round: usize,
    pub final_accuracy: f64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum Record {
    Round(RoundReport),
    Summary(RunSummary),
}

/// Best value of `metric` over `history` and the first round reaching it.
pub fn best_over<F: Fn(&RoundReport) -> f64>(history: &[RoundReport], metric: F) -> Option<(f64, usize)> {
    history.iter().fold(None, |best, r| {
        let v = metric(r);
        match best {
            Some((b, _)) if b >= v => best,
            _ => Some((v, r.round)),
        }
    })
}

/// One JSON object per line: every round, then the summary.
pub fn write_reports(path: impl AsRef<Path>, history: &[RoundReport], summary: &RunSummary) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |rec: &Record| -> Result<()> {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    };
    for r in history {
        line(&Record::Round(r.clone()))?;
    }
    line(&Record::Summary(summary.clone()))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
