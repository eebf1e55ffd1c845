//! Symmetric label noise at the client level.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::rng;

/// Client-level noise model.
///
/// Each client is noisy with probability `rho`; a noisy client draws its
/// rate `μ ~ U(tau, 1)` and relabels `round(μ·|D|)` of its samples uniformly
/// over all classes (the original class included).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub rho: f64,
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseConfig {
    pub fn clean() -> Self {
        NoiseConfig {
            rho: 0.0,
            tau: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("noise.rho must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config("noise.tau must be in [0, 1)"));
        }
        Ok(())
    }
}

/// What happened to one client's labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientNoise {
    pub client: usize,
    pub noisy: bool,
    /// Drawn `μ`, zero for clean clients.
    pub nominal_rate: f64,
    /// Samples whose label was redrawn.
    pub resampled: usize,
    /// Redrawn samples that ended up with a different label.
    pub changed: usize,
    pub size: usize,
}

impl ClientNoise {
    pub fn realized_rate(&self) -> f64 {
        self.changed as f64 / self.size as f64
    }
}

/// Corrupts the observed labels of `dataset` client by client.
///
/// Features and clean labels are left untouched. Each client's draws come
/// from its own stream, so the outcome is independent of client order.
pub fn inject_noise(
    dataset: &Dataset,
    partition: &Partition,
    cfg: &NoiseConfig,
) -> Result<(Dataset, Vec<ClientNoise>)> {
    cfg.validate()?;
    let m = dataset.num_classes();
    let mut noisy = dataset.clean_labels().to_vec();
    let mut report = Vec::with_capacity(partition.num_clients());
    for (client, shard) in partition.shards().iter().enumerate() {
        let mut rng = rng::stream(cfg.seed, &[rng::NOISE, client as u64]);
        let is_noisy = rng.random_bool(cfg.rho);
        let mut entry = ClientNoise {
            client,
            noisy: is_noisy,
            nominal_rate: 0.0,
            resampled: 0,
            changed: 0,
            size: shard.len(),
        };
        if is_noisy {
            let mu = if cfg.tau < 1.0 { rng.random_range(cfg.tau..1.0) } else { 1.0 };
            let count = ((mu * shard.len() as f64).round() as usize).min(shard.len());
            for pos in index::sample(&mut rng, shard.len(), count) {
                let i = shard[pos];
                let label = rng.random_range(0..m);
                if label != noisy[i] {
                    entry.changed += 1;
                }
                noisy[i] = label;
            }
            entry.nominal_rate = mu;
            entry.resampled = count;
        }
        report.push(entry);
    }
    Ok((dataset.clone().with_noisy_labels(noisy)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_iid, Split};
    use crate::numcore::Matrix;

    fn data(n: usize, m: usize) -> Dataset {
        let labels = (0..n).map(|i| i % m).collect();
        Dataset::new(Matrix::zeros(n, 1), labels, m, Split::Train).unwrap()
    }

    #[test]
    fn rho_zero_is_a_no_op() {
        let d = data(200, 10);
        let p = partition_iid(200, 10, 1).unwrap();
        let (noisy, report) = inject_noise(&d, &p, &NoiseConfig::clean()).unwrap();
        assert_eq!(noisy.noisy_labels(), d.clean_labels());
        assert!(!noisy.has_noise());
        assert!(report.iter().all(|r| !r.noisy && r.changed == 0));
    }

    #[test]
    fn mask_counts_match_changed_labels() {
        let d = data(1000, 4);
        let p = partition_iid(1000, 10, 1).unwrap();
        let cfg = NoiseConfig {
            rho: 1.0,
            tau: 0.2,
            seed: 5,
        };
        let (noisy, report) = inject_noise(&d, &p, &cfg).unwrap();
        for r in &report {
            let masked = p.shard(r.client).iter().filter(|&&i| noisy.noise_mask()[i]).count();
            assert_eq!(masked, r.changed);
            assert!(r.nominal_rate >= 0.2 && r.nominal_rate < 1.0);
            assert_eq!(r.resampled, (r.nominal_rate * r.size as f64).round() as usize);
        }
        assert_eq!(noisy.clean_labels(), d.clean_labels());
        assert_eq!(noisy.features(), d.features());
    }

    #[test]
    fn reproducible_per_seed() {
        let d = data(300, 3);
        let p = partition_iid(300, 6, 1).unwrap();
        let cfg = NoiseConfig {
            rho: 0.5,
            tau: 0.5,
            seed: 11,
        };
        let a = inject_noise(&d, &p, &cfg).unwrap();
        let b = inject_noise(&d, &p, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = NoiseConfig {
            rho: 0.5,
            tau: 1.0,
            seed: 0,
        };
        assert!(bad.validate().is_err());
        assert!(NoiseConfig { rho: 1.5, ..bad }.validate().is_err());
    }
}
