//! Config-driven experiments: dataset wiring, seeds and report files.
//!
//! Configs are TOML. Any value can be overridden with a flat
//! `section.key=value` string, where `value` is parsed as a TOML value and
//! falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    self, inject_noise, io, partition_iid, partition_noniid, random_model_embeddings, synth_clusters,
    ClientNoise, Dataset, EmbeddingStore, NoiseConfig, Partition, Split, SynthConfig,
};
use crate::error::{Error, Result};
use crate::fed::{run_federation_with, FedConfig, FederationInputs, FederationState, RunResult};
use crate::losses::{LossConfig, Method};
use crate::metrics::{write_reports, RunSummary};
use crate::model::MlpSpec;

/// Where the samples come from. A synthetic dataset is redrawn for every run
/// seed; its own `seed` field is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SynthConfig),
    Files(FileDataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDataset {
    pub train_features: PathBuf,
    pub train_labels: PathBuf,
    /// Externally corrupted training labels (e.g. human annotation noise).
    #[serde(default)]
    pub train_noisy_labels: Option<PathBuf>,
    pub test_features: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionConfig {
    Iid,
    #[serde(rename = "noniid")]
    NonIid {
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
}

fn default_p() -> f64 {
    0.7
}

fn default_alpha() -> f64 {
    5.0
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig::NonIid {
            p: default_p(),
            alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub rho: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbeddingConfig {
    /// The generator's own latent geometry; synthetic datasets only.
    Synthetic,
    File { path: PathBuf },
    /// Feature extractor of a freshly initialized client network.
    RandomModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub noise: Option<NoiseSection>,
    #[serde(default)]
    pub embeddings: Option<EmbeddingConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub fed: FedConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Sets `path` (dot separated) in `table` to `value`, creating tables on
/// the way.
fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut cur = table;
    while let Some(key) = parts.next() {
        if key.is_empty() {
            return Err(Error::config(format!("bad override key {path:?}")));
        }
        if parts.peek().is_none() {
            cur.insert(key.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {path:?}: {key} is not a table")))?;
    }
    unreachable!("split yields at least one part")
}

fn parse_override(raw: &str) -> Result<(&str, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {raw:?} is not key=value")))?;
    let key = key.trim();
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}

impl ExperimentConfig {
    /// Parses TOML text and applies overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_path(&mut table, key, value)?;
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Federation settings with the loss section and a run seed filled in.
    pub fn fed_config(&self, seed: u64) -> FedConfig {
        FedConfig {
            seed,
            loss: self.loss.clone(),
            ..self.fed.clone()
        }
    }

    /// Every problem with the config, not just the first.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errors = self.fed_config(0).problems();
        if self.seeds.is_empty() {
            errors.push("seeds must list at least one seed".into());
        }
        if self.model.hidden_dims.is_empty() || self.model.hidden_dims.contains(&0) {
            errors.push("model.hidden_dims needs at least one positive width".into());
        }
        match &self.dataset {
            DatasetConfig::Synthetic(s) => {
                if let Err(e) = s.validate() {
                    errors.push(e.to_string());
                }
                if s.samples < self.fed.num_clients {
                    errors.push("dataset.samples must be at least fed.num_clients".into());
                }
            }
            DatasetConfig::Files(f) => {
                if f.train_noisy_labels.is_some() && self.noise.is_some() {
                    errors.push(
                        "give either [noise] or dataset.train_noisy_labels, not both".into(),
                    );
                }
            }
        }
        if let Some(n) = self.noise {
            let cfg = NoiseConfig {
                rho: n.rho,
                tau: n.tau,
                seed: 0,
            };
            if let Err(e) = cfg.validate() {
                errors.push(e.to_string());
            }
        }
        if let PartitionConfig::NonIid { p, alpha } = self.partition {
            if !(p > 0.0 && p <= 1.0) {
                errors.push("partition.p must be in (0, 1]".into());
            }
            if !(alpha > 0.0) {
                errors.push("partition.alpha must be > 0".into());
            }
        }
        match (&self.embeddings, &self.dataset) {
            (None, _) if matches!(self.loss.method, Method::Ours | Method::Akd) => {
                errors.push(format!(
                    "method {} needs an [embeddings] section",
                    self.loss.method.as_str()
                ));
            }
            (Some(EmbeddingConfig::Synthetic), DatasetConfig::Files(_)) => {
                errors.push("synthetic embeddings need a synthetic dataset".into());
            }
            _ => {}
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

/// Train/test data, partition, noise and embeddings for one seed.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub noise: Vec<ClientNoise>,
    pub embeddings: Option<EmbeddingStore>,
    pub model: MlpSpec,
}

impl PreparedRun {
    pub fn inputs(&self) -> FederationInputs<'_> {
        FederationInputs {
            train: &self.train,
            test: &self.test,
            partition: &self.partition,
            embeddings: self.embeddings.as_ref(),
            noise: Some(&self.noise),
            model: &self.model,
        }
    }
}

/// Noise bookkeeping for labels that arrived already corrupted.
fn observed_noise(train: &Dataset, partition: &Partition) -> Vec<ClientNoise> {
    partition
        .shards()
        .iter()
        .enumerate()
        .map(|(client, shard)| {
            let changed = shard.iter().filter(|&&i| train.noise_mask()[i]).count();
            ClientNoise {
                client,
                noisy: changed > 0,
                nominal_rate: changed as f64 / shard.len() as f64,
                resampled: changed,
                changed,
                size: shard.len(),
            }
        })
        .collect()
}

/// Builds everything a single seed needs.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedRun> {
    cfg.validate().map_err(|e| Error::config(e.join("; ")))?;
    let mut synthetic_embeddings = None;
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Synthetic(s) => {
            let data = synth_clusters(&SynthConfig {
                seed,
                ..s.clone()
            })?;
            synthetic_embeddings = Some(data.train_embeddings);
            (data.train, data.test)
        }
        DatasetConfig::Files(f) => (
            data::load_dataset(
                &f.train_features,
                &f.train_labels,
                f.train_noisy_labels.as_deref(),
                Split::Train,
            )?,
            data::load_dataset(&f.test_features, &f.test_labels, None, Split::Test)?,
        ),
    };
    if train.num_classes() != test.num_classes() {
        return Err(Error::Alignment("train and test disagree on the class count".into()));
    }

    let partition = match cfg.partition {
        PartitionConfig::Iid => partition_iid(train.len(), cfg.fed.num_clients, seed)?,
        PartitionConfig::NonIid { p, alpha } => partition_noniid(
            train.clean_labels(),
            train.num_classes(),
            cfg.fed.num_clients,
            p,
            alpha,
            seed,
        )?,
    };

    let (train, noise) = match cfg.noise {
        Some(n) => inject_noise(
            &train,
            &partition,
            &NoiseConfig {
                rho: n.rho,
                tau: n.tau,
                seed,
            },
        )?,
        None => {
            let noise = observed_noise(&train, &partition);
            (train, noise)
        }
    };

    let mut model = MlpSpec::new(train.input_dim(), cfg.model.hidden_dims.clone(), train.num_classes())?;
    let embeddings = match &cfg.embeddings {
        None => None,
        Some(EmbeddingConfig::Synthetic) => synthetic_embeddings,
        Some(EmbeddingConfig::File { path }) => Some(io::load_embeddings(path)?),
        Some(EmbeddingConfig::RandomModel) => Some(random_model_embeddings(&train, &model, seed)?),
    };
    if let Some(e) = &embeddings {
        e.check_aligned(&train)?;
        if cfg.loss.method == Method::Akd {
            model = model.with_adapter(e.dim());
        }
    }
    Ok(PreparedRun {
        train,
        test,
        partition,
        noise,
        embeddings,
        model,
    })
}

/// One seed's result and its summary record.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: RunResult,
    pub summary: RunSummary,
}

/// Mean and sample standard deviation of a best-metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub values: Vec<f64>,
    pub mean: f64,
    /// `n − 1` denominator; zero for a single seed.
    pub std: f64,
}

impl SeedStats {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        SeedStats { values, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: Option<String>,
    pub seeds: Vec<u64>,
    pub best_accuracy: SeedStats,
    pub best_macro_f1: SeedStats,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub seeds: Vec<SeedOutcome>,
    pub summary: ExperimentSummary,
}

/// Runs one seed and returns its result plus summary record.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    on_round: impl FnMut(&FederationState),
) -> Result<SeedOutcome> {
    let prepared = prepare(cfg, seed)?;
    let fed = cfg.fed_config(seed);
    let result = run_federation_with(prepared.inputs(), &fed, on_round)?;
    let mut echo = serde_json::to_value(cfg)?;
    echo["seeds"] = serde_json::json!([seed]);
    if matches!(cfg.dataset, DatasetConfig::Synthetic(_)) {
        echo["dataset"]["seed"] = serde_json::json!(seed);
    }
    let summary = RunSummary {
        seed,
        best_accuracy: result.best_accuracy,
        best_accuracy_round: result.best_accuracy_round,
        best_macro_f1: result.best_macro_f1,
        best_macro_f1_round: result.best_macro_f1_round,
        final_accuracy: result.history.last().map_or(0.0, |r| r.test_accuracy),
        config: echo,
    };
    Ok(SeedOutcome {
        seed,
        result,
        summary,
    })
}

/// Runs every seed in turn. When `cfg.output_dir` is set, writes
/// `seed-<n>.jsonl` per seed and `summary.json`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mut on_round: impl FnMut(u64, &FederationState),
) -> Result<ExperimentOutcome> {
    cfg.validate().map_err(|e| Error::config(e.join("; ")))?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let outcome = run_seed(cfg, seed, |s| on_round(seed, s))?;
        if let Some(dir) = &cfg.output_dir {
            write_reports(
                dir.join(format!("seed-{seed}.jsonl")),
                &outcome.result.history,
                &outcome.summary,
            )?;
        }
        seeds.push(outcome);
    }
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        seeds: cfg.seeds.clone(),
        best_accuracy: SeedStats::from_values(seeds.iter().map(|s| s.summary.best_accuracy).collect()),
        best_macro_f1: SeedStats::from_values(seeds.iter().map(|s| s.summary.best_macro_f1).collect()),
        config: serde_json::to_value(cfg)?,
    };
    if let Some(dir) = &cfg.output_dir {
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&summary)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(ExperimentOutcome { seeds, summary })
}

/// Files written by [`export_synth`].
pub const EXPORT_FILES: [&str; 6] = [
    "train_features.fske",
    "train_labels.fskl",
    "train_embeddings.fske",
    "test_features.fske",
    "test_labels.fskl",
    "test_embeddings.fske",
];

/// Writes a synthetic benchmark as `FSKE`/`FSKL` files. Embedding rows are
/// written already normalized.
pub fn export_synth(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = synth_clusters(cfg)?;
    let paths: Vec<PathBuf> = EXPORT_FILES.iter().map(|f| dir.join(f)).collect();
    io::write_matrix(&paths[0], data.train.features())?;
    io::write_labels(&paths[1], data.train.clean_labels(), data.train.num_classes())?;
    io::write_matrix(&paths[2], data.train_embeddings.embeddings())?;
    io::write_matrix(&paths[3], data.test.features())?;
    io::write_labels(&paths[4], data.test.clean_labels(), data.test.num_classes())?;
    io::write_matrix(&paths[5], data.test_embeddings.embeddings())?;
    Ok(paths)
}

/// Loads a [`SynthConfig`] from a TOML file.
pub fn load_synth_config(path: impl AsRef<Path>) -> Result<SynthConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}
