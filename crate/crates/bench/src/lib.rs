//! Shared fixtures for the benchmarks.

use fedks::experiment::{prepare, ExperimentConfig, PreparedRun};

/// The default synthetic benchmark with 20 non-IID noisy clients.
pub fn benchmark_run(method: &str) -> PreparedRun {
    let text = format!(
        r#"
[dataset]
source = "synthetic"
[noise]
rho = 0.7
tau = 0.5
[embeddings]
source = "synthetic"
[fed]
num_clients = 20
fraction = 0.1
rounds = 1
[loss]
method = "{method}"
"#
    );
    let cfg = ExperimentConfig::from_toml_str(&text, &[]).expect("fixture config parses");
    prepare(&cfg, 0).expect("fixture prepares")
}

/// First `n` row indices.
pub fn first_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}
