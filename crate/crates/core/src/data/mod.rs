//! Datasets, client partitions, label noise and embedding tables.

mod dataset;
mod embeddings;
pub mod io;
mod noise;
mod partition;
mod synth;

pub use dataset::{Dataset, Split};
pub use embeddings::{EmbeddingSource, EmbeddingStore};
pub use io::{load_dataset, load_embeddings};
pub use noise::{inject_noise, ClientNoise, NoiseConfig};
pub use partition::{partition_iid, partition_noniid, Partition};
pub use synth::{random_model_embeddings, synth_clusters, SynthConfig, SynthData};
