//! Statistical checks of the client noise model against its analytic
//! description.

use fedks::data::{inject_noise, partition_iid, Dataset, NoiseConfig, Split};
use fedks::numcore::Matrix;

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.5758293035489;

#[derive(Debug, Clone)]
pub struct IntervalCheck {
    pub name: &'static str,
    pub observed: f64,
    pub lo: f64,
    pub hi: f64,
}

impl IntervalCheck {
    pub fn around(name: &'static str, observed: f64, mean: f64, sd: f64) -> Self {
        IntervalCheck {
            name,
            observed,
            lo: mean - Z99 * sd,
            hi: mean + Z99 * sd,
        }
    }

    pub fn passed(&self) -> bool {
        self.observed >= self.lo && self.observed <= self.hi
    }
}

/// 200 clients of 100 samples over 10 balanced classes at
/// `(rho, tau) = (0.7, 0.5)`.
pub fn noise_model_checks(seed: u64) -> Vec<IntervalCheck> {
    let (clients, per_client, m) = (200usize, 100usize, 10usize);
    let (rho, tau) = (0.7, 0.5);
    let n = clients * per_client;
    let data = Dataset::new(Matrix::zeros(n, 1), (0..n).map(|i| i % m).collect(), m, Split::Train).unwrap();
    let partition = partition_iid(n, clients, seed).unwrap();
    let (noisy, report) = inject_noise(&data, &partition, &NoiseConfig { rho, tau, seed }).unwrap();

    let keep = 1.0 - 1.0 / m as f64;
    let noisy_clients: Vec<_> = report.iter().filter(|r| r.noisy).collect();
    let k = noisy_clients.len() as f64;
    let resampled: usize = noisy_clients.iter().map(|r| r.resampled).sum();
    let changed: usize = noisy_clients.iter().map(|r| r.changed).sum();
    let mean_mu = noisy_clients.iter().map(|r| r.nominal_rate).sum::<f64>() / k;
    let mean_rate = noisy_clients.iter().map(|r| r.realized_rate()).sum::<f64>() / k;
    let var_mu = (1.0 - tau) * (1.0 - tau) / 12.0;
    let mean_of_mu = (1.0 + tau) / 2.0;
    let var_rate = keep * keep * var_mu + keep * (1.0 - keep) * mean_of_mu / per_client as f64;
    let clean_changes: usize = report.iter().filter(|r| !r.noisy).map(|r| r.changed).sum();
    let mask_total = noisy.noise_mask().iter().filter(|&&b| b).count();

    vec![
        IntervalCheck::around(
            "noisy client count",
            k,
            rho * clients as f64,
            (clients as f64 * rho * (1.0 - rho)).sqrt(),
        ),
        IntervalCheck::around("nominal rate mean", mean_mu, mean_of_mu, (var_mu / k).sqrt()),
        IntervalCheck::around(
            "changed / redrawn",
            changed as f64 / resampled as f64,
            keep,
            (keep * (1.0 - keep) / resampled as f64).sqrt(),
        ),
        IntervalCheck::around(
            "realized rate mean",
            mean_rate,
            keep * mean_of_mu,
            (var_rate / k).sqrt(),
        ),
        IntervalCheck {
            name: "clean clients unchanged",
            observed: clean_changes as f64,
            lo: 0.0,
            hi: 0.0,
        },
        IntervalCheck {
            name: "mask matches changes",
            observed: mask_total as f64 - changed as f64,
            lo: 0.0,
            hi: 0.0,
        },
    ]
}
