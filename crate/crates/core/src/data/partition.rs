//! Splitting the training set across clients.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

/// Disjoint, nonempty per-client index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    shards: Vec<Vec<usize>>,
}

impl Partition {
    /// Checks the partition invariants against a dataset of `n_samples`.
    pub fn new(shards: Vec<Vec<usize>>, n_samples: usize) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::config("partition needs at least one client"));
        }
        let mut seen = vec![false; n_samples];
        for (c, shard) in shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::config(format!("client {c} has no samples")));
            }
            for &i in shard {
                if i >= n_samples || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::config(format!(
                        "client {c}: index {i} is out of range or assigned twice"
                    )));
                }
            }
        }
        Ok(Partition { shards })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, client: usize) -> &[usize] {
        &self.shards[client]
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }
}

/// Random split into `num_clients` shards whose sizes differ by at most one.
pub fn partition_iid(n_samples: usize, num_clients: usize, seed: u64) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::config("number of clients must be positive"));
    }
    if num_clients > n_samples {
        return Err(Error::config(format!(
            "{num_clients} clients for {n_samples} samples"
        )));
    }
    let mut rng = rng::stream(seed, &[rng::PARTITION, 0]);
    let mut idx: Vec<usize> = (0..n_samples).collect();
    idx.shuffle(&mut rng);
    let base = n_samples / num_clients;
    let extra = n_samples % num_clients;
    let mut shards = Vec::with_capacity(num_clients);
    let mut start = 0;
    for c in 0..num_clients {
        let len = base + usize::from(c < extra);
        shards.push(idx[start..start + len].to_vec());
        start += len;
    }
    Partition::new(shards, n_samples)
}

/// Label-skewed split.
///
/// For every class a Bernoulli(`p`) presence mask over clients is drawn
/// (redrawn while empty), then the class's samples are divided among the
/// present clients with Dirichlet(`alpha`) proportions. Clients left empty
/// receive one sample from the currently largest client.
pub fn partition_noniid(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    p: f64,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::config("number of clients must be positive"));
    }
    if num_clients > labels.len() {
        return Err(Error::config(format!(
            "{num_clients} clients for {} samples",
            labels.len()
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config("Bernoulli presence probability must be in (0, 1]"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("Dirichlet concentration must be > 0"));
    }
    let mut rng = rng::stream(seed, &[rng::PARTITION, 1]);

    let mut presence = vec![vec![false; num_classes]; num_clients];
    for class in 0..num_classes {
        loop {
            let mut any = false;
            for row in presence.iter_mut() {
                row[class] = rng.random_bool(p);
                any |= row[class];
            }
            if any {
                break;
            }
        }
    }

    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let present: Vec<usize> = (0..num_clients).filter(|&c| presence[c][class]).collect();
        let props = dirichlet(&gamma, present.len(), &mut rng);
        let n = members.len() as f64;
        let mut cum = 0.0;
        let mut start = 0;
        for (i, (&client, &share)) in present.iter().zip(&props).enumerate() {
            cum += share;
            let end = if i + 1 == present.len() {
                members.len()
            } else {
                ((cum * n).round() as usize).clamp(start, members.len())
            };
            shards[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }

    for c in 0..num_clients {
        if shards[c].is_empty() {
            let donor = (0..num_clients)
                .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
                .expect("at least one client");
            let moved = shards[donor].pop().expect("donor has samples");
            shards[c].push(moved);
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Partition::new(shards, labels.len())
}

fn dirichlet(gamma: &Gamma<f64>, k: usize, rng: &mut SimRng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}
