//! Synthetic benchmark with sub-class cluster structure.
//!
//! Every class owns several Gaussian sub-clusters in a latent space. The
//! latent point itself plays the role of the frozen SSL embedding; the
//! classifier sees a random linear projection of it buried in extra Gaussian
//! noise, so the SSL space is cleaner than the input space.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, EmbeddingSource, EmbeddingStore, Split};
use crate::error::{Error, Result};
use crate::model::{MlpSpec, ModelParams};
use crate::numcore::{l2_norm, Matrix};
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub subclusters_per_class: usize,
    pub samples: usize,
    pub input_dim: usize,
    pub ssl_dim: usize,
    /// Distance of each class centre from the origin, in units of the
    /// within-cluster standard deviation.
    pub class_radius: f64,
    /// Distance of each sub-cluster centre from its class centre, same units.
    pub subcluster_radius: f64,
    /// Standard deviation of the noise added to the projected inputs.
    pub input_noise: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 10,
            subclusters_per_class: 3,
            samples: 10_000,
            input_dim: 128,
            ssl_dim: 32,
            class_radius: 8.0,
            subcluster_radius: 5.0,
            input_noise: 3.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.subclusters_per_class == 0
            || self.samples == 0
            || self.input_dim == 0
            || self.ssl_dim == 0
        {
            return Err(Error::config("synthetic counts must all be >= 1"));
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("synth.test_fraction must be in [0, 1)"));
        }
        if !(self.class_radius >= 0.0 && self.subcluster_radius >= 0.0 && self.input_noise >= 0.0)
        {
            return Err(Error::config("synthetic radii and noise must be >= 0"));
        }
        Ok(())
    }
}

/// Output of [`synth_clusters`].
#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Dataset,
    pub test: Dataset,
    pub train_embeddings: EmbeddingStore,
    pub test_embeddings: EmbeddingStore,
    /// Sub-cluster id of every training sample.
    pub train_subclusters: Vec<usize>,
}

fn random_direction(rng: &mut SimRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = l2_norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws the benchmark. Labels are the parent class of each sample's
/// sub-cluster; the split is the first `1 − test_fraction` of a shuffle.
pub fn synth_clusters(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    // Datasets need two classes; a single-class request still gets a valid
    // label space with an unused second class.
    let label_space = cfg.num_classes.max(2);
    let mut rng = rng::stream(cfg.seed, &[rng::SYNTH]);
    let d = cfg.ssl_dim;

    let mut centres = Vec::with_capacity(cfg.num_classes * cfg.subclusters_per_class);
    for _ in 0..cfg.num_classes {
        let class: Vec<f64> = random_direction(&mut rng, d)
            .into_iter()
            .map(|v| v * cfg.class_radius)
            .collect();
        for _ in 0..cfg.subclusters_per_class {
            let offset = random_direction(&mut rng, d);
            centres.push(
                class
                    .iter()
                    .zip(offset)
                    .map(|(c, o)| c + o * cfg.subcluster_radius)
                    .collect::<Vec<f64>>(),
            );
        }
    }

    let scale = 1.0 / (d as f64).sqrt();
    let projection = Matrix::from_vec(
        d,
        cfg.input_dim,
        (0..d * cfg.input_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect(),
    )?;

    let n = cfg.samples;
    let mut sub = Vec::with_capacity(n);
    let mut latent = Matrix::zeros(n, d);
    for i in 0..n {
        let s = rng.random_range(0..centres.len());
        sub.push(s);
        for (l, c) in latent.row_mut(i).iter_mut().zip(&centres[s]) {
            *l = c + rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut inputs = latent.matmul(&projection)?;
    for v in inputs.as_mut_slice() {
        *v += cfg.input_noise * rng.sample::<f64, _>(StandardNormal);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n - ((n as f64 * cfg.test_fraction).round() as usize).min(n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);

    let build = |idx: &[usize], split: Split| -> Result<(Dataset, EmbeddingStore)> {
        let labels = idx
            .iter()
            .map(|&i| sub[i] / cfg.subclusters_per_class)
            .collect();
        let dataset = Dataset::new(inputs.select_rows(idx), labels, label_space, split)?;
        let store = EmbeddingStore::from_raw(latent.select_rows(idx), EmbeddingSource::Synthetic)?;
        Ok((dataset, store))
    };
    let (train, train_embeddings) = build(train_idx, Split::Train)?;
    let (test, test_embeddings) = build(test_idx, Split::Test)?;
    Ok(SynthData {
        train,
        test,
        train_embeddings,
        test_embeddings,
        train_subclusters: train_idx.iter().map(|&i| sub[i]).collect(),
    })
}

/// Embeddings taken from the feature extractor of a freshly initialized
/// client network, row-normalized.
pub fn random_model_embeddings(dataset: &Dataset, spec: &MlpSpec, seed: u64) -> Result<EmbeddingStore> {
    let params = ModelParams::init(spec, rng::derive_seed(seed, &[rng::EMBED]))?;
    let features = params.forward(dataset.features())?.features;
    EmbeddingStore::from_raw(features, EmbeddingSource::RandomModel)
}
