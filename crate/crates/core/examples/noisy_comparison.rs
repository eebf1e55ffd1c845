//! Compares plain FedAvg with the neighbourhood-regularized loss on the
//! synthetic benchmark under heavy label noise.
//!
//! ```text
//! cargo run --release -p fedks --example noisy_comparison -- [seeds] [rounds]
//! ```

use fedks::experiment::ExperimentConfig;
use fedks::fed::window_mean;

const BASE: &str = r#"
[dataset]
source = "synthetic"
[partition]
kind = "noniid"
p = 0.7
alpha = 5.0
[noise]
rho = 0.7
tau = 0.5
[embeddings]
source = "synthetic"
[fed]
num_clients = 20
"#;

fn main() -> fedks::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().map_or(5, |s| s.parse().expect("seed count"));
    let rounds: usize = args.get(1).map_or(100, |s| s.parse().expect("round count"));
    let variants: [(&str, &[&str]); 3] = [
        ("fedavg-ce", &["loss.method=fedavg-ce"]),
        ("ours", &["loss.method=ours"]),
        ("ours/random", &["loss.method=ours", "embeddings.source=random-model"]),
    ];
    for seed in 0..seeds {
        for (name, extra) in variants {
            let mut overrides = vec![format!("fed.rounds={rounds}")];
            overrides.extend(extra.iter().map(|s| s.to_string()));
            let cfg = ExperimentConfig::from_toml_str(BASE, &overrides)?;
            let out = fedks::experiment::run_seed(&cfg, seed, |_| {})?;
            let h = &out.result.history;
            let tail = &h[h.len() - (h.len() / 5).max(1)..];
            let last = h.last().expect("at least one round");
            println!(
                "seed {seed} {name:<12} best {:.4} final {:.4} noisyCE {:.3} cleanCE {:.3} grad {:.4} repr {:.4}",
                out.result.best_accuracy,
                last.test_accuracy,
                last.ce.noisy.unwrap_or(f64::NAN),
                last.ce.clean.unwrap_or(f64::NAN),
                window_mean(tail, |r| r.grad_norm, true).unwrap_or(f64::NAN),
                window_mean(tail, |r| r.repr_grad_norm, true).unwrap_or(f64::NAN),
            );
        }
    }
    Ok(())
}
