use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedks::experiment::{export_synth, load_synth_config, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedks", version, about = "Federated training under label noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write its reports.
    Run {
        config: PathBuf,
        /// `key.path=value` overrides applied on top of the file.
        overrides: Vec<String>,
        /// Print a progress line every this many rounds (0 = never).
        #[arg(long, default_value_t = 10)]
        progress: usize,
    },
    /// Check a config without running anything.
    Validate {
        config: PathBuf,
        overrides: Vec<String>,
    },
    /// Write a synthetic benchmark as FSKE/FSKL files.
    ExportSynth {
        /// TOML file with generator settings; missing keys take defaults.
        spec: PathBuf,
        out_dir: PathBuf,
    },
}

fn load(config: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    ExperimentConfig::load(config, overrides).with_context(|| format!("loading {}", config.display()))
}

/// Prints every validation problem; `false` when there were any.
fn report_problems(cfg: &ExperimentConfig) -> bool {
    match cfg.validate() {
        Ok(()) => true,
        Err(problems) => {
            eprintln!("invalid config:");
            for p in problems {
                eprintln!("  - {p}");
            }
            false
        }
    }
}

fn run(config: &Path, overrides: &[String], progress: usize) -> Result<ExitCode> {
    let mut cfg = load(config, overrides)?;
    if !report_problems(&cfg) {
        return Ok(ExitCode::from(2));
    }
    if cfg.output_dir.is_none() {
        let stem = config.file_stem().map_or("experiment".into(), |s| s.to_string_lossy().into_owned());
        cfg.output_dir = Some(PathBuf::from("runs").join(stem));
    }
    let outcome = run_experiment(&cfg, |seed, state| {
        let Some(r) = state.history.last() else { return };
        if progress > 0 && (r.round % progress == 0 || state.round == cfg.fed.rounds) {
            eprintln!(
                "seed {seed} round {:>4}: accuracy {:.4} macro-F1 {:.4}",
                r.round, r.test_accuracy, r.test_macro_f1
            );
        }
    })?;
    for s in &outcome.seeds {
        println!(
            "seed {}: best accuracy {:.4} (round {}), best macro-F1 {:.4} (round {})",
            s.seed,
            s.summary.best_accuracy,
            s.summary.best_accuracy_round,
            s.summary.best_macro_f1,
            s.summary.best_macro_f1_round
        );
    }
    let acc = &outcome.summary.best_accuracy;
    let f1 = &outcome.summary.best_macro_f1;
    println!(
        "best accuracy {:.4} ± {:.4}, best macro-F1 {:.4} ± {:.4} over {} seed(s)",
        acc.mean,
        acc.std,
        f1.mean,
        f1.std,
        acc.values.len()
    );
    println!("reports in {}", cfg.output_dir.as_deref().unwrap_or(Path::new(".")).display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run {
            config,
            overrides,
            progress,
        } => run(&config, &overrides, progress),
        Command::Validate { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            Ok(if report_problems(&cfg) {
                println!("ok");
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::ExportSynth { spec, out_dir } => {
            let cfg = load_synth_config(&spec)?;
            for p in export_synth(&cfg, &out_dir)? {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
