//! FedAvg rounds: client sampling, local SGD, size-weighted averaging.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientNoise, Dataset, EmbeddingStore, Partition};
use crate::error::{Error, Result};
use crate::losses::{batch_objective, LossConfig, Method};
use crate::metrics::{self, GroupMeans, RoundReport};
use crate::model::{MlpSpec, ModelParams};
use crate::numcore::GradTape;
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub num_clients: usize,
    /// Fraction of clients sampled per round.
    pub fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Set per run by the experiment layer, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Train the sampled clients of a round concurrently.
    pub parallel: bool,
    /// Clients followed by the clean/noisy diagnostics.
    pub tracked_clients: usize,
    /// Samples per tracked client used for diagnostics.
    pub probe_limit: usize,
    /// Filled from the experiment's `[loss]` section.
    #[serde(skip)]
    pub loss: LossConfig,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clients: 100,
            fraction: 0.1,
            rounds: 1000,
            local_epochs: 3,
            batch_size: 50,
            lr: 0.01,
            weight_decay: 3e-4,
            seed: 0,
            parallel: true,
            tracked_clients: 10,
            probe_limit: 512,
            loss: LossConfig::default(),
        }
    }
}

impl FedConfig {
    /// Collects every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_clients == 0 {
            out.push("fed.num_clients must be >= 1".to_string());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            out.push("fed.fraction must be in (0, 1]".to_string());
        }
        if self.local_epochs == 0 {
            out.push("fed.local_epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            out.push("fed.batch_size must be >= 1".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            out.push("fed.lr must be >= 0".to_string());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push("fed.weight_decay must be >= 0".to_string());
        }
        if let Err(e) = self.loss.validate() {
            out.push(e.to_string());
        }
        if self.loss.uses_neighbors() && self.batch_size <= self.loss.k {
            out.push(format!(
                "fed.batch_size ({}) must exceed loss.k ({})",
                self.batch_size, self.loss.k
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::config(p.join("; ")))
        }
    }

    pub fn clients_per_round(&self) -> usize {
        clients_per_round(self.num_clients, self.fraction)
    }
}

fn clients_per_round(n: usize, fraction: f64) -> usize {
    // Guard against 0.1·100 = 10.000000000000002 style overshoot.
    let c = (fraction * n as f64 - 1e-9).ceil().max(1.0) as usize;
    c.min(n)
}

/// Uniform sample of `max(⌈F·N⌉, 1)` distinct clients, ascending.
pub fn select_clients(num_clients: usize, fraction: f64, rng: &mut SimRng) -> Vec<usize> {
    let count = clients_per_round(num_clients, fraction);
    let mut chosen = index::sample(rng, num_clients, count).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Training data shared read-only by all clients.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub dataset: &'a Dataset,
    pub embeddings: Option<&'a EmbeddingStore>,
}

/// Running means over one client's local batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientDiagnostics {
    pub batches: usize,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_contrastive: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: ModelParams,
    pub shard_size: usize,
    pub diagnostics: ClientDiagnostics,
}

/// Splits a shuffled shard into batches of `size`. A trailing remainder of
/// at most `k` samples is folded into the batch before it, since the
/// contrastive loss needs more than `k` samples per batch.
fn make_batches(order: &[usize], size: usize, k: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(size).collect();
    if batches.len() > 1 {
        let last = batches[batches.len() - 1];
        if last.len() <= k {
            batches.pop();
            let prev = batches.pop().expect("more than one batch");
            let start = order.len() - prev.len() - last.len();
            batches.push(&order[start..]);
        }
    }
    batches
}

/// Local training of one client, starting from the global parameters.
pub fn client_update(
    global: &ModelParams,
    shard: &[usize],
    data: TrainView<'_>,
    cfg: &FedConfig,
    rng: &mut SimRng,
) -> Result<ModelParams> {
    client_update_with_diagnostics(global, shard, data, cfg, rng).map(|(p, _)| p)
}

pub fn client_update_with_diagnostics(
    global: &ModelParams,
    shard: &[usize],
    data: TrainView<'_>,
    cfg: &FedConfig,
    rng: &mut SimRng,
) -> Result<(ModelParams, ClientDiagnostics)> {
    if shard.is_empty() {
        return Err(Error::Empty("client shard is empty"));
    }
    let mut params = global.clone();
    let mut order = shard.to_vec();
    let mut tape = GradTape::new();
    let mut diag = ClientDiagnostics::default();
    let mut contrastive_sum = 0.0;
    let decay = 2.0 * cfg.weight_decay;

    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for batch in make_batches(&order, cfg.batch_size, cfg.loss.k) {
            let x = data.dataset.features().select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.dataset.noisy_labels()[i]).collect();
            let ssl = data.embeddings.map(|e| e.embeddings().select_rows(batch));

            tape.clear();
            let taped = params.forward_taped(&x, &mut tape)?;
            let out = taped.outputs(&tape);
            let loss = batch_objective(&out, &labels, ssl.as_ref(), &cfg.loss)?;
            let grad = params.backward(&tape, &taped, loss.grads)?;
            for (w, g) in params.flat_mut().iter_mut().zip(&grad) {
                *w -= cfg.lr * (g + decay * *w);
            }

            diag.batches += 1;
            diag.mean_loss += loss.total;
            diag.mean_ce += loss.ce;
            if let Some(c) = loss.contrastive {
                contrastive_sum += c;
                diag.mean_contrastive = Some(0.0);
            }
        }
    }
    let n = diag.batches as f64;
    diag.mean_loss /= n;
    diag.mean_ce /= n;
    diag.mean_contrastive = diag.mean_contrastive.map(|_| contrastive_sum / n);
    if !params.is_finite() {
        return Err(Error::NonFinite { op: "client_update" });
    }
    Ok((params, diag))
}

/// Size-weighted parameter average. The last weight is `1 − Σ others` so the
/// weights sum to exactly one.
pub fn aggregate(updates: &[(&ModelParams, usize)]) -> Result<ModelParams> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::Empty("aggregate over no client updates"));
    };
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Empty("aggregate over zero samples"));
    }
    for (p, _) in updates {
        if p.spec() != first.spec() {
            return Err(Error::shape("aggregate", "client models differ in shape"));
        }
    }
    let mut weights: Vec<f64> = updates
        .iter()
        .map(|(_, n)| *n as f64 / total as f64)
        .collect();
    let k = weights.len();
    let partial: f64 = weights[..k - 1].iter().sum();
    weights[k - 1] = 1.0 - partial;

    let mut flat = vec![0.0; first.flatten().len()];
    for ((p, _), w) in updates.iter().zip(&weights) {
        for (acc, v) in flat.iter_mut().zip(p.flatten()) {
            *acc += w * v;
        }
    }
    ModelParams::unflatten(first.spec(), flat)
}

/// Global model plus the per-round history.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub global: ModelParams,
    pub round: usize,
    pub history: Vec<RoundReport>,
}

/// Everything [`run_federation`] needs besides the configuration.
#[derive(Debug, Clone, Copy)]
pub struct FederationInputs<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub partition: &'a Partition,
    pub embeddings: Option<&'a EmbeddingStore>,
    /// Noise outcome per client, used to choose the diagnostic probe.
    pub noise: Option<&'a [ClientNoise]>,
    pub model: &'a MlpSpec,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_params: ModelParams,
    pub history: Vec<RoundReport>,
    pub best_accuracy: f64,
    pub best_accuracy_round: usize,
    pub best_macro_f1: f64,
    pub best_macro_f1_round: usize,
    /// Clients whose samples make up the diagnostic probe.
    pub tracked_clients: Vec<usize>,
}

/// Clients followed by the diagnostics: the noisiest clients by realized
/// rate when noise information exists, otherwise the lowest ids.
pub fn tracked_clients(partition: &Partition, noise: Option<&[ClientNoise]>, limit: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = match noise {
        Some(report) => {
            let mut noisy: Vec<&ClientNoise> = report.iter().filter(|c| c.changed > 0).collect();
            noisy.sort_by(|a, b| {
                b.realized_rate()
                    .total_cmp(&a.realized_rate())
                    .then(a.client.cmp(&b.client))
            });
            let mut ids: Vec<usize> = noisy.iter().map(|c| c.client).collect();
            if ids.is_empty() {
                ids = (0..partition.num_clients()).collect();
            }
            ids
        }
        None => (0..partition.num_clients()).collect(),
    };
    ids.truncate(limit);
    ids
}

fn probe_indices(partition: &Partition, tracked: &[usize], limit: usize) -> Vec<usize> {
    tracked
        .iter()
        .flat_map(|&c| partition.shard(c).iter().take(limit).copied())
        .collect()
}

/// Prepares a run: validates inputs and draws the initial global model.
pub fn init_state(inputs: &FederationInputs<'_>, cfg: &FedConfig) -> Result<FederationState> {
    cfg.validate()?;
    inputs.model.validate()?;
    if inputs.partition.num_clients() != cfg.num_clients {
        return Err(Error::config(format!(
            "partition has {} clients, fed.num_clients is {}",
            inputs.partition.num_clients(),
            cfg.num_clients
        )));
    }
    if inputs.model.input_dim != inputs.train.input_dim() || inputs.test.input_dim() != inputs.train.input_dim() {
        return Err(Error::shape("run_federation", "model input width vs dataset features"));
    }
    if inputs.model.num_classes != inputs.train.num_classes() {
        return Err(Error::shape("run_federation", "model classes vs dataset classes"));
    }
    let needs_ssl = matches!(cfg.loss.method, Method::Ours | Method::Akd);
    match inputs.embeddings {
        Some(e) => e.check_aligned(inputs.train)?,
        None if needs_ssl => {
            return Err(Error::config(format!(
                "method {} needs SSL embeddings",
                cfg.loss.method.as_str()
            )))
        }
        None => {}
    }
    if cfg.loss.method == Method::Akd {
        let want = inputs.embeddings.map(EmbeddingStore::dim);
        if inputs.model.adapter_dim != want {
            return Err(Error::config("akd needs a model adapter as wide as the SSL embeddings"));
        }
    }
    if cfg.loss.uses_neighbors() {
        if let Some((c, s)) = inputs
            .partition
            .shards()
            .iter()
            .enumerate()
            .find(|(_, s)| s.len() <= cfg.loss.k)
        {
            return Err(Error::config(format!(
                "client {c} has {} samples, the contrastive loss needs more than K={}",
                s.len(),
                cfg.loss.k
            )));
        }
    }
    let global = ModelParams::init(inputs.model, rng::derive_seed(cfg.seed, &[rng::INIT]))?;
    Ok(FederationState {
        global,
        round: 0,
        history: Vec::new(),
    })
}

/// One round: sample, train locally, aggregate. Returns the updates'
/// diagnostics alongside the new global parameters.
pub fn run_round(
    state: &FederationState,
    inputs: &FederationInputs<'_>,
    cfg: &FedConfig,
    round: usize,
) -> Result<(ModelParams, Vec<usize>, Vec<(ClientDiagnostics, usize)>)> {
    let mut select_rng = rng::stream(cfg.seed, &[rng::SELECT, round as u64]);
    let selected = select_clients(cfg.num_clients, cfg.fraction, &mut select_rng);
    let view = TrainView {
        dataset: inputs.train,
        embeddings: inputs.embeddings,
    };
    let train_one = |&client: &usize| -> Result<ClientUpdate> {
        let mut rng = rng::stream(cfg.seed, &[rng::CLIENT, client as u64, round as u64]);
        let shard = inputs.partition.shard(client);
        let (params, diagnostics) =
            client_update_with_diagnostics(&state.global, shard, view, cfg, &mut rng)?;
        Ok(ClientUpdate {
            client,
            params,
            shard_size: shard.len(),
            diagnostics,
        })
    };
    let updates: Vec<ClientUpdate> = if cfg.parallel {
        selected.par_iter().map(train_one).collect::<Result<_>>()?
    } else {
        selected.iter().map(train_one).collect::<Result<_>>()?
    };
    let pairs: Vec<(&ModelParams, usize)> = updates.iter().map(|u| (&u.params, u.shard_size)).collect();
    let global = aggregate(&pairs)?;
    if !global.is_finite() {
        return Err(Error::NonFinite { op: "aggregate" });
    }
    let diags = updates.iter().map(|u| (u.diagnostics, u.shard_size)).collect();
    Ok((global, selected, diags))
}

fn evaluate(
    params: &ModelParams,
    inputs: &FederationInputs<'_>,
    cfg: &FedConfig,
    probe: &[usize],
    round: usize,
    selected: Vec<usize>,
    diags: &[(ClientDiagnostics, usize)],
) -> Result<RoundReport> {
    let logits = params.forward(inputs.test.features())?.logits;
    let labels = inputs.test.clean_labels();
    let weighted = |f: &dyn Fn(&ClientDiagnostics) -> Option<f64>| -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (d, _) in diags {
            let v = f(d)?;
            num += v * d.batches as f64;
            den += d.batches as f64;
        }
        (den > 0.0).then(|| num / den)
    };
    let probe = metrics::probe_diagnostics(params, inputs.train, probe, &cfg.loss)?;
    Ok(RoundReport {
        round,
        test_accuracy: metrics::accuracy(&logits, labels)?,
        test_macro_f1: metrics::macro_f1(&logits, labels, inputs.test.num_classes())?,
        selected_clients: selected,
        train_loss: weighted(&|d| Some(d.mean_loss)),
        train_ce: weighted(&|d| Some(d.mean_ce)),
        train_contrastive: weighted(&|d| d.mean_contrastive),
        ce: probe.ce,
        grad_norm: probe.grad_norm,
        repr_grad_norm: probe.repr_grad_norm,
    })
}

/// Full protocol: evaluate the initial model, then `rounds` rounds of
/// sample → local training → aggregation → evaluation.
pub fn run_federation(inputs: FederationInputs<'_>, cfg: &FedConfig) -> Result<RunResult> {
    run_federation_with(inputs, cfg, |_| {})
}

/// [`run_federation`] with a callback after every round, e.g. for progress
/// output or to snapshot the parameters.
pub fn run_federation_with<F>(inputs: FederationInputs<'_>, cfg: &FedConfig, mut on_round: F) -> Result<RunResult>
where
    F: FnMut(&FederationState),
{
    let mut state = init_state(&inputs, cfg)?;
    let tracked = tracked_clients(inputs.partition, inputs.noise, cfg.tracked_clients);
    let probe = probe_indices(inputs.partition, &tracked, cfg.probe_limit);

    let initial = evaluate(&state.global, &inputs, cfg, &probe, 0, Vec::new(), &[])?;
    state.history.push(initial);
    on_round(&state);
    for round in 1..=cfg.rounds {
        let (global, selected, diags) = run_round(&state, &inputs, cfg, round)?;
        let report = evaluate(&global, &inputs, cfg, &probe, round, selected, &diags)?;
        state.global = global;
        state.round = round;
        state.history.push(report);
        on_round(&state);
    }

    let (best_accuracy, best_accuracy_round) =
        metrics::best_over(&state.history, |r| r.test_accuracy).expect("history is nonempty");
    let (best_macro_f1, best_macro_f1_round) =
        metrics::best_over(&state.history, |r| r.test_macro_f1).expect("history is nonempty");
    Ok(RunResult {
        final_params: state.global,
        history: state.history,
        best_accuracy,
        best_accuracy_round,
        best_macro_f1,
        best_macro_f1_round,
        tracked_clients: tracked,
    })
}

/// Mean of a group statistic over a window of rounds, skipping rounds where
/// the group was absent.
pub fn window_mean(history: &[RoundReport], pick: impl Fn(&RoundReport) -> GroupMeans, noisy: bool) -> Option<f64> {
    let vals: Vec<f64> = history
        .iter()
        .filter_map(|r| {
            let g = pick(r);
            if noisy {
                g.noisy
            } else {
                g.clean
            }
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[doc(hidden)]
pub fn batches_for_test(order: &[usize], size: usize, k: usize) -> Vec<Vec<usize>> {
    make_batches(order, size, k).into_iter().map(<[usize]>::to_vec).collect()
}
