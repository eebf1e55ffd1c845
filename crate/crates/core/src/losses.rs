//! Training objectives.
//!
//! Every loss returns its batch-mean value together with the exact gradient
//! with respect to its input matrix, so the model only has to push output
//! gradients back through the network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::{batch_neighborhoods, Neighborhood};
use crate::model::{ForwardOutput, OutputGrads};
use crate::numcore::{dot, l2_norm, log_sum_exp, softmax_into, Matrix};

/// Log-probability assigned to the zero entries of the one-hot target in
/// reverse cross-entropy.
pub const RCE_LOG_ZERO: f64 = -4.0;

/// Which training objective a client optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Plain cross-entropy.
    #[serde(rename = "fedavg-ce")]
    FedAvgCe,
    /// Cross-entropy plus the SSL-neighbourhood contrastive term.
    Ours,
    /// Symmetric cross-entropy.
    #[serde(rename = "symce")]
    SymCe,
    /// Cross-entropy on norm-clipped logits.
    #[serde(rename = "logitclip")]
    LogitClip,
    /// Cross-entropy plus L1 regression of an adapter onto SSL embeddings.
    Akd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedAvgCe => "fedavg-ce",
            Method::Ours => "ours",
            Method::SymCe => "symce",
            Method::LogitClip => "logitclip",
            Method::Akd => "akd",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fedavg-ce" | "fedavg" | "ce" => Method::FedAvgCe,
            "ours" => Method::Ours,
            "symce" => Method::SymCe,
            "logitclip" => Method::LogitClip,
            "akd" => Method::Akd,
            other => return Err(Error::config(format!("unknown method {other:?}"))),
        })
    }
}

/// Terms of the contrastive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Every other batch member (`m − 1` terms).
    #[default]
    ExcludeSelf,
    /// Every batch member including the anchor itself (`m` terms).
    IncludeSelf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub method: Method,
    pub lambda: f64,
    pub temperature: f64,
    pub k: usize,
    pub denominator: Denominator,
    pub symce_alpha: f64,
    pub symce_beta: f64,
    pub logitclip_bound: f64,
    pub akd_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            method: Method::Ours,
            lambda: 3.0,
            temperature: 0.3,
            k: 4,
            denominator: Denominator::ExcludeSelf,
            symce_alpha: 0.5,
            symce_beta: 0.5,
            logitclip_bound: 1.0,
            akd_weight: 10.0,
        }
    }
}

impl LossConfig {
    pub fn with_method(method: Method) -> Self {
        LossConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errors.push("loss.temperature must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errors.push("loss.lambda must be >= 0");
        }
        if self.k == 0 {
            errors.push("loss.k must be >= 1");
        }
        if !(self.symce_alpha >= 0.0 && self.symce_beta >= 0.0) {
            errors.push("loss.symce_alpha and loss.symce_beta must be >= 0");
        }
        if !(self.logitclip_bound > 0.0) {
            errors.push("loss.logitclip_bound must be > 0");
        }
        if !(self.akd_weight >= 0.0) {
            errors.push("loss.akd_weight must be >= 0");
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errors.join("; ")))
        }
    }

    /// Whether this objective needs in-batch neighbourhoods.
    pub fn uses_neighbors(&self) -> bool {
        self.method == Method::Ours
    }
}

/// A batch-mean loss and its gradient with respect to the loss input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Matrix,
}

fn check_labels(op: &'static str, logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            op,
            format!("{} labels for {} rows", labels.len(), logits.rows()),
        ));
    }
    if logits.rows() == 0 {
        return Err(Error::Empty("loss over an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::shape(
            op,
            format!("label {bad} with {} classes", logits.cols()),
        ));
    }
    Ok(())
}

/// Per-sample `−log softmax(logits)[label]`.
pub fn ce_per_sample(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels("ce_loss", logits, labels)?;
    Ok(logits
        .row_iter()
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row.iter().copied()) - row[y])
        .collect())
}

/// Mean cross-entropy; gradient `(softmax − onehot) / m`.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<LossValue> {
    let per_sample = ce_per_sample(logits, labels)?;
    let m = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        softmax_into(logits.row(r), row);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= m);
    }
    Ok(LossValue {
        value: per_sample.iter().sum::<f64>() / m,
        grad,
    })
}

/// Local K-similarity contrastive loss over the batch representations.
///
/// Rows are L2-normalized here, so similarities are cosines. For anchor `j`
/// with positives `P` and denominator set `D`:
///
/// `L_j = log Σ_{l∈D} exp(s_jl / T) − log Σ_{k∈P} exp(s_jk / T)`
///
/// The result is the mean over anchors and is never negative because `P ⊆ D`.
pub fn kcl_loss(
    features: &Matrix,
    neighborhoods: &[Neighborhood],
    temperature: f64,
    denominator: Denominator,
) -> Result<LossValue> {
    if !(temperature > 0.0) {
        return Err(Error::config("contrastive temperature must be > 0"));
    }
    let m = features.rows();
    if neighborhoods.len() != m {
        return Err(Error::shape(
            "kcl_loss",
            format!("{} neighbourhoods for {m} rows", neighborhoods.len()),
        ));
    }
    if m < 2 {
        return Err(Error::shape("kcl_loss", "needs at least two rows"));
    }
    let norms: Vec<f64> = features.row_iter().map(l2_norm).collect();
    let unit = features.normalize_rows();
    let sims = unit.matmul_t(&unit)?;

    let mut total = 0.0;
    // Symmetric ∂L/∂sims, folded into one product with the unit rows.
    let mut w_sym = Matrix::zeros(m, m);
    let mut weights = vec![0.0; m];
    for nb in neighborhoods {
        let j = nb.anchor;
        let s = |l: usize| sims.get(j, l) / temperature;
        let den_idx = (0..m).filter(|&l| denominator == Denominator::IncludeSelf || l != j);
        let lse_den = log_sum_exp(den_idx.clone().map(s));
        let lse_pos = log_sum_exp(nb.positives.iter().map(|&k| s(k)));
        // P = D when K = m − 1; summation order alone must not push it below 0
        total += (lse_den - lse_pos).max(0.0);

        // ∂L_j/∂s_jl = softmax_D(l) − softmax_P(l)
        weights.iter_mut().for_each(|w| *w = 0.0);
        for l in den_idx {
            weights[l] += (s(l) - lse_den).exp();
        }
        for &k in &nb.positives {
            weights[k] -= (s(k) - lse_pos).exp();
        }
        let scale = 1.0 / (temperature * m as f64);
        for (l, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                w_sym.row_mut(j)[l] += w * scale;
                w_sym.row_mut(l)[j] += w * scale;
            }
        }
    }
    let d_unit = w_sym.matmul(&unit)?;

    // Back through the row normalization.
    let mut grad = Matrix::zeros(m, features.cols());
    for r in 0..m {
        if norms[r] == 0.0 {
            continue;
        }
        let u = unit.row(r);
        let du = d_unit.row(r);
        let proj = dot(u, du);
        for ((g, &uv), &duv) in grad.row_mut(r).iter_mut().zip(u).zip(du) {
            *g = (duv - uv * proj) / norms[r];
        }
    }
    Ok(LossValue {
        value: total / m as f64,
        grad,
    })
}

/// Cross-entropy plus the weighted contrastive term.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub ce: f64,
    pub contrastive: f64,
    pub grad_logits: Matrix,
    /// `None` when the contrastive weight is zero.
    pub grad_features: Option<Matrix>,
}

pub fn combined_loss(
    logits: &Matrix,
    features: &Matrix,
    labels: &[usize],
    neighborhoods: &[Neighborhood],
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    let ce = ce_loss(logits, labels)?;
    let cl = kcl_loss(features, neighborhoods, cfg.temperature, cfg.denominator)?;
    let grad_features = (cfg.lambda != 0.0).then(|| cl.grad.scale(cfg.lambda));
    Ok(CombinedLoss {
        value: ce.value + cfg.lambda * cl.value,
        ce: ce.value,
        contrastive: cl.value,
        grad_logits: ce.grad,
        grad_features,
    })
}

/// `α·CE + β·RCE`, with `log 0` in the one-hot target clamped to
/// [`RCE_LOG_ZERO`], which makes `RCE = −A·(1 − p_y)`.
pub fn symce_loss(logits: &Matrix, labels: &[usize], alpha: f64, beta: f64) -> Result<LossValue> {
    let ce = ce_loss(logits, labels)?;
    let m = labels.len() as f64;
    let mut rce = 0.0;
    let mut grad = ce.grad.scale(alpha);
    let mut p = vec![0.0; logits.cols()];
    for (r, &y) in labels.iter().enumerate() {
        softmax_into(logits.row(r), &mut p);
        let py = p[y];
        rce += -RCE_LOG_ZERO * (1.0 - py);
        // ∂RCE/∂z_k = A·p_y·(δ_ky − p_k)
        for (k, g) in grad.row_mut(r).iter_mut().enumerate() {
            let delta = if k == y { 1.0 } else { 0.0 };
            *g += beta * RCE_LOG_ZERO * py * (delta - p[k]) / m;
        }
    }
    Ok(LossValue {
        value: alpha * ce.value + beta * rce / m,
        grad,
    })
}

/// Rescales each row whose L2 norm exceeds `bound` down to norm `bound`.
pub fn logitclip(logits: &Matrix, bound: f64) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = l2_norm(row);
        if n > bound {
            row.iter_mut().for_each(|v| *v *= bound / n);
        }
    }
    out
}

/// Pulls a gradient with respect to the clipped logits back to the raw logits.
pub fn logitclip_backward(logits: &Matrix, bound: f64, grad_clipped: &Matrix) -> Matrix {
    let mut grad = grad_clipped.clone();
    for r in 0..logits.rows() {
        let z = logits.row(r);
        let n = l2_norm(z);
        if n <= bound {
            continue;
        }
        // d(b·z/‖z‖) = (b/‖z‖)·(I − ẑẑᵀ)
        let proj = dot(z, grad_clipped.row(r)) / (n * n);
        for (g, &zv) in grad.row_mut(r).iter_mut().zip(z) {
            *g = bound / n * (*g - zv * proj);
        }
    }
    grad
}

/// `weight · mean |adapter − ssl|` over all entries.
pub fn akd_loss(adapter: &Matrix, ssl_batch: &Matrix, weight: f64) -> Result<LossValue> {
    if adapter.shape() != ssl_batch.shape() {
        return Err(Error::shape(
            "akd_loss",
            format!("adapter {:?} vs embeddings {:?}", adapter.shape(), ssl_batch.shape()),
        ));
    }
    let n = adapter.as_slice().len() as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(adapter.rows(), adapter.cols());
    for ((g, &a), &z) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(adapter.as_slice())
        .zip(ssl_batch.as_slice())
    {
        let d = a - z;
        total += d.abs();
        *g = if d > 0.0 {
            weight / n
        } else if d < 0.0 {
            -weight / n
        } else {
            0.0
        };
    }
    Ok(LossValue {
        value: weight * total / n,
        grad,
    })
}

/// Loss of one training batch under the configured method.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: f64,
    pub ce: f64,
    pub contrastive: Option<f64>,
    pub grads: OutputGrads,
}

/// Evaluates the configured objective on one batch.
///
/// `ssl_batch` holds the frozen embeddings of the batch rows; it is only read
/// by the methods that need it.
pub fn batch_objective(
    out: &ForwardOutput,
    labels: &[usize],
    ssl_batch: Option<&Matrix>,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let need_ssl = || {
        ssl_batch.ok_or_else(|| Error::config(format!("{} needs SSL embeddings", cfg.method.as_str())))
    };
    match cfg.method {
        Method::FedAvgCe => {
            let ce = ce_loss(&out.logits, labels)?;
            Ok(BatchLoss {
                total: ce.value,
                ce: ce.value,
                contrastive: None,
                grads: OutputGrads {
                    logits: ce.grad,
                    features: None,
                    adapter: None,
                },
            })
        }
        Method::Ours => {
            let nbs = batch_neighborhoods(need_ssl()?, cfg.k)?;
            let c = combined_loss(&out.logits, &out.features, labels, &nbs, cfg)?;
            Ok(BatchLoss {
                total: c.value,
                ce: c.ce,
                contrastive: Some(c.contrastive),
                grads: OutputGrads {
                    logits: c.grad_logits,
                    features: c.grad_features,
                    adapter: None,
                },
            })
        }
        Method::SymCe => {
            let ce = ce_per_sample(&out.logits, labels)?;
            let s = symce_loss(&out.logits, labels, cfg.symce_alpha, cfg.symce_beta)?;
            Ok(BatchLoss {
                total: s.value,
                ce: ce.iter().sum::<f64>() / ce.len() as f64,
                contrastive: None,
                grads: OutputGrads {
                    logits: s.grad,
                    features: None,
                    adapter: None,
                },
            })
        }
        Method::LogitClip => {
            let clipped = logitclip(&out.logits, cfg.logitclip_bound);
            let ce = ce_loss(&clipped, labels)?;
            Ok(BatchLoss {
                total: ce.value,
                ce: ce.value,
                contrastive: None,
                grads: OutputGrads {
                    logits: logitclip_backward(&out.logits, cfg.logitclip_bound, &ce.grad),
                    features: None,
                    adapter: None,
                },
            })
        }
        Method::Akd => {
            let adapter = out
                .adapter
                .as_ref()
                .ok_or_else(|| Error::config("akd needs a model with an adapter"))?;
            let ce = ce_loss(&out.logits, labels)?;
            let l1 = akd_loss(adapter, need_ssl()?, cfg.akd_weight)?;
            Ok(BatchLoss {
                total: ce.value + l1.value,
                ce: ce.value,
                contrastive: None,
                grads: OutputGrads {
                    logits: ce.grad,
                    features: None,
                    adapter: Some(l1.grad),
                },
            })
        }
    }
}

/// Batch-mean gradient of the configured loss with respect to the raw
/// logits. Only the logit-dependent terms contribute.
pub fn logit_gradient(logits: &Matrix, labels: &[usize], cfg: &LossConfig) -> Result<Matrix> {
    Ok(match cfg.method {
        Method::FedAvgCe | Method::Ours | Method::Akd => ce_loss(logits, labels)?.grad,
        Method::SymCe => symce_loss(logits, labels, cfg.symce_alpha, cfg.symce_beta)?.grad,
        Method::LogitClip => {
            let clipped = logitclip(logits, cfg.logitclip_bound);
            logitclip_backward(logits, cfg.logitclip_bound, &ce_loss(&clipped, labels)?.grad)
        }
    })
}
