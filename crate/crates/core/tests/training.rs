mod common;

use fedks::data::{partition_iid, synth_clusters, Dataset, Split, SynthConfig};
use fedks::fed::{aggregate, client_update, run_federation, FedConfig, FederationInputs, TrainView};
use fedks::losses::{LossConfig, Method};
use fedks::model::{MlpSpec, ModelParams};
use fedks::numcore::Matrix;
use fedks::rng;

/// One SGD step on a 1-input, 1-hidden-unit, 2-class network, worked out
/// by hand from the chain rule.
#[test]
fn single_step_matches_hand_computation() {
    let xs = [0.5, -1.0, 2.0, 1.5];
    let ys = [0usize, 1, 1, 0];
    let (w1, b1, v, c) = (0.8, 0.1, [0.6, -0.4], [0.05, -0.05]);
    let (lr, wd) = (0.1, 0.01);

    let spec = MlpSpec::new(1, vec![1], 2).unwrap();
    let params = ModelParams::unflatten(&spec, vec![w1, b1, v[0], v[1], c[0], c[1]]).unwrap();
    let data = Dataset::new(Matrix::from_vec(4, 1, xs.to_vec()).unwrap(), ys.to_vec(), 2, Split::Train).unwrap();
    let cfg = FedConfig {
        num_clients: 1,
        fraction: 1.0,
        local_epochs: 1,
        batch_size: 4,
        lr,
        weight_decay: wd,
        loss: LossConfig {
            k: 1,
            ..LossConfig::with_method(Method::FedAvgCe)
        },
        ..FedConfig::default()
    };
    let view = TrainView {
        dataset: &data,
        embeddings: None,
    };
    let got = client_update(&params, &[0, 1, 2, 3], view, &cfg, &mut rng::stream(0, &[9])).unwrap();

    let mut g = [0.0f64; 6];
    for i in 0..4 {
        let pre = w1 * xs[i] + b1;
        let h = pre.max(0.0);
        let o = [h * v[0] + c[0], h * v[1] + c[1]];
        let z = (o[0].exp() + o[1].exp()).ln();
        let p = [(o[0] - z).exp(), (o[1] - z).exp()];
        let d = [
            (p[0] - (ys[i] == 0) as u8 as f64) / 4.0,
            (p[1] - (ys[i] == 1) as u8 as f64) / 4.0,
        ];
        g[2] += h * d[0];
        g[3] += h * d[1];
        g[4] += d[0];
        g[5] += d[1];
        let dh = d[0] * v[0] + d[1] * v[1];
        let dpre = if pre > 0.0 { dh } else { 0.0 };
        g[0] += dpre * xs[i];
        g[1] += dpre;
    }
    let before = [w1, b1, v[0], v[1], c[0], c[1]];
    for k in 0..6 {
        let want = before[k] - lr * (g[k] + 2.0 * wd * before[k]);
        assert!((got.flatten()[k] - want).abs() < 1e-14, "param {k}: {} vs {want}", got.flatten()[k]);
    }
}

fn small_setup(seed: u64) -> (fedks::data::SynthData, fedks::Partition, MlpSpec) {
    let data = synth_clusters(&SynthConfig {
        samples: 600,
        input_dim: 12,
        ssl_dim: 6,
        num_classes: 3,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let partition = partition_iid(data.train.len(), 4, seed).unwrap();
    let spec = MlpSpec::new(12, vec![10], 3).unwrap();
    (data, partition, spec)
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let (data, partition, spec) = small_setup(1);
    let params = ModelParams::init(&spec, 5).unwrap();
    for method in [Method::FedAvgCe, Method::Ours, Method::SymCe, Method::LogitClip] {
        let cfg = FedConfig {
            lr: 0.0,
            batch_size: 20,
            loss: LossConfig::with_method(method),
            ..FedConfig::default()
        };
        let view = TrainView {
            dataset: &data.train,
            embeddings: Some(&data.train_embeddings),
        };
        let out = client_update(&params, partition.shard(0), view, &cfg, &mut rng::stream(1, &[2])).unwrap();
        assert_eq!(out.flatten(), params.flatten(), "{method:?}");
    }
}

#[test]
fn single_client_aggregate_is_exact() {
    let spec = MlpSpec::new(3, vec![4], 2).unwrap();
    let p = ModelParams::init(&spec, 3).unwrap();
    assert_eq!(aggregate(&[(&p, 17)]).unwrap(), p);
}

#[test]
fn every_method_learns_the_clean_benchmark() {
    let (data, partition, spec) = small_setup(2);
    for method in [Method::FedAvgCe, Method::Ours, Method::SymCe, Method::LogitClip, Method::Akd] {
        let model = if method == Method::Akd {
            spec.clone().with_adapter(data.train_embeddings.dim())
        } else {
            spec.clone()
        };
        let cfg = FedConfig {
            num_clients: 4,
            fraction: 0.5,
            rounds: 15,
            batch_size: 20,
            lr: 0.05,
            loss: LossConfig::with_method(method),
            ..FedConfig::default()
        };
        let inputs = FederationInputs {
            train: &data.train,
            test: &data.test,
            partition: &partition,
            embeddings: Some(&data.train_embeddings),
            noise: None,
            model: &model,
        };
        let run = run_federation(inputs, &cfg).unwrap();
        assert_eq!(run.history.len(), 16);
        assert!(run.final_params.is_finite());
        assert!(run.best_accuracy > 0.8, "{method:?}: {}", run.best_accuracy);
        let contrastive = run.history[1].train_contrastive;
        assert_eq!(contrastive.is_some(), method == Method::Ours, "{method:?}");
    }
}

#[test]
fn reruns_are_bitwise_identical() {
    let (data, partition, spec) = small_setup(3);
    let cfg = FedConfig {
        num_clients: 4,
        fraction: 0.5,
        rounds: 4,
        batch_size: 20,
        ..FedConfig::default()
    };
    let run = || {
        run_federation(
            FederationInputs {
                train: &data.train,
                test: &data.test,
                partition: &partition,
                embeddings: Some(&data.train_embeddings),
                noise: None,
                model: &spec,
            },
            &cfg,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.final_params, b.final_params);
    assert_eq!(a.history, b.history);
}

#[test]
fn short_tails_join_the_previous_batch() {
    use fedks::fed::batches_for_test as batches;
    let order: Vec<usize> = (0..104).collect();
    let b = batches(&order, 50, 4);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![50, 54]);
    let b = batches(&order, 50, 3);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![50, 50, 4]);
    assert_eq!(batches(&order[..3], 50, 4), vec![vec![0, 1, 2]]);
}
