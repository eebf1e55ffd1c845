use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedks::metrics::{read_reports, Record, RoundReport};

const CONFIG: &str = r#"
name = "cli-small"
seeds = [1]
[dataset]
source = "synthetic"
samples = 600
input_dim = 10
ssl_dim = 6
num_classes = 3
[noise]
rho = 0.7
tau = 0.5
[embeddings]
source = "synthetic"
[model]
hidden_dims = [8]
[fed]
num_clients = 4
fraction = 0.5
rounds = 4
batch_size = 20
[loss]
method = "ours"
lambda = 3.0
"#;

fn fedks(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedks")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn out_override(dir: &Path) -> String {
    format!("output_dir={:?}", dir.display().to_string())
}

fn run_ok(config: &Path, overrides: &[String]) {
    let mut args = vec!["run", config.to_str().unwrap(), "--progress", "0"];
    args.extend(overrides.iter().map(String::as_str));
    let out = fedks(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn rounds(path: PathBuf) -> Vec<RoundReport> {
    read_reports(path)
        .unwrap()
        .into_iter()
        .filter_map(|r| match r {
            Record::Round(r) => Some(r),
            Record::Summary(_) => None,
        })
        .collect()
}

#[test]
fn validate_accepts_a_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = fedks(&["validate", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

#[test]
fn validate_reports_each_bad_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = fedks(&[
        "validate",
        cfg.to_str().unwrap(),
        "loss.k=20",
        "noise.tau=1.0",
        "fed.fraction=0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for field in ["loss.k", "noise.tau", "fed.fraction"] {
        assert!(err.contains(field), "missing {field} in:\n{err}");
    }
}

#[test]
fn run_refuses_an_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out_dir = dir.path().join("out");
    let out = fedks(&["run", cfg.to_str().unwrap(), "loss.k=20", &out_override(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = fedks(&["validate", cfg.to_str().unwrap(), "fed.rouns=3"]);
    assert!(!out.status.success());
}

#[test]
fn reruns_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out_dir = dir.path().join("out");
    let ov = [out_override(&out_dir)];
    run_ok(&cfg, &ov);
    let first = std::fs::read(out_dir.join("seed-1.jsonl")).unwrap();
    let first_summary = std::fs::read(out_dir.join("summary.json")).unwrap();
    run_ok(&cfg, &ov);
    assert_eq!(first, std::fs::read(out_dir.join("seed-1.jsonl")).unwrap());
    assert_eq!(first_summary, std::fs::read(out_dir.join("summary.json")).unwrap());
}

#[test]
fn zero_lambda_override_matches_plain_cross_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("lambda0");
    let b = dir.path().join("fedavg");
    run_ok(&cfg, &[out_override(&a), "loss.lambda=0".into()]);
    run_ok(&cfg, &[out_override(&b), "loss.method=\"fedavg-ce\"".into()]);
    let ra = rounds(a.join("seed-1.jsonl"));
    let rb = rounds(b.join("seed-1.jsonl"));
    assert_eq!(ra.len(), 5);
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.test_accuracy, y.test_accuracy);
        assert_eq!(x.test_macro_f1, y.test_macro_f1);
        assert_eq!(x.selected_clients, y.selected_clients);
        assert_eq!(x.train_ce, y.train_ce);
        assert_eq!(x.train_loss, y.train_loss);
        assert_eq!(x.ce, y.ce);
        assert_eq!(x.grad_norm, y.grad_norm);
        assert_eq!(x.repr_grad_norm, y.repr_grad_norm);
    }
}

#[test]
fn multi_seed_run_prints_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out_dir = dir.path().join("out");
    let out = fedks(&[
        "run",
        cfg.to_str().unwrap(),
        "--progress",
        "2",
        "seeds=[1, 2, 3]",
        &out_override(&out_dir),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("over 3 seed(s)"), "{stdout}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("round    2"));
    for s in 1..=3 {
        assert!(out_dir.join(format!("seed-{s}.jsonl")).exists());
    }
    let summary: fedks::experiment::ExperimentSummary =
        serde_json::from_slice(&std::fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    let acc = &summary.best_accuracy;
    assert_eq!(acc.values.len(), 3);
    let mean = acc.values.iter().sum::<f64>() / 3.0;
    assert!((acc.mean - mean).abs() < 1e-12);
    let var = acc.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
    assert!((acc.std - var.sqrt()).abs() < 1e-12);
}

#[test]
fn export_synth_writes_all_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("synth.toml");
    std::fs::write(&spec, "samples = 200\ninput_dim = 6\nssl_dim = 4\nnum_classes = 3\n").unwrap();
    let out_dir = dir.path().join("data");
    let out = fedks(&["export-synth", spec.to_str().unwrap(), out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in fedks::experiment::EXPORT_FILES {
        assert!(out_dir.join(name).is_file(), "{name}");
    }
    let features = fedks::data::io::read_raw_matrix(out_dir.join("train_features.fske")).unwrap();
    assert_eq!((features.rows, features.cols), (160, 6));
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let out = fedks(&["validate", root.join("noisy-benchmark.toml").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fedks::experiment::load_synth_config(root.join("synth.toml")).unwrap();
}
