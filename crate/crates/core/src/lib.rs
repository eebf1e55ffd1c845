//! Federated learning simulator for training under label noise.
//!
//! Clients train small MLP classifiers on their shard of a shared dataset and
//! the server averages their parameters. Besides plain cross-entropy the
//! clients can add a contrastive term that keeps each sample's representation
//! close to its nearest in-batch neighbours in a frozen self-supervised
//! embedding space, or use one of several robust-loss baselines.
//!
//! Runs are deterministic: every random stream is derived from the run seed,
//! and parallel client execution yields bit-identical results to serial
//! execution.

pub mod data;
mod error;
pub mod experiment;
pub mod fed;
pub mod knn;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod rng;

pub use data::{Dataset, EmbeddingStore, NoiseConfig, Partition, Split, SynthConfig};
pub use error::{Error, Result};
pub use fed::{FedConfig, FederationState, RunResult};
pub use knn::{batch_neighborhoods, Neighborhood};
pub use losses::{LossConfig, Method};
pub use metrics::RoundReport;
pub use model::{MlpSpec, ModelParams};
pub use numcore::{GradTape, Matrix};
