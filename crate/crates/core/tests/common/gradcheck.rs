//! Finite-difference checks shared by the gradient tests and the
//! acceptance gate. Every check returns the worst relative error over its
//! trials.

use fedks::knn::batch_neighborhoods;
use fedks::losses::{
    akd_loss, batch_objective, ce_loss, kcl_loss, logitclip, logitclip_backward, symce_loss, Denominator,
    LossConfig, Method,
};
use fedks::model::{MlpSpec, ModelParams};
use fedks::numcore::{GradTape, Matrix, NodeId, Primitive};
use rand::Rng;

use super::{gaussian, labels, numeric_grad, rel_err, rng};

pub const TRIALS: usize = 20;

/// `Σ R ⊙ op(inputs)` against the tape's backward pass seeded with `R`,
/// for every input of the primitive.
fn check_primitive(op: Primitive, inputs: &[Matrix], seed: u64) -> f64 {
    let eval = |xs: &[Matrix]| -> (GradTape, Vec<NodeId>, NodeId) {
        let mut tape = GradTape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = tape.apply(op.clone(), &ids).unwrap();
        (tape, ids, out)
    };
    let (tape, ids, out) = eval(inputs);
    let shape = tape.value(out).shape();
    let weights = gaussian(&mut rng(seed ^ 0xA5A5), shape.0, shape.1, 1.0);
    let grads = tape.backward(out, weights.clone()).unwrap();
    let mut worst: f64 = 0.0;
    for (pos, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(*id, &tape);
        let numeric = numeric_grad(&inputs[pos], |x| {
            let mut xs = inputs.to_vec();
            xs[pos] = x.clone();
            let (tape, _, out) = eval(&xs);
            tape.value(out)
                .as_slice()
                .iter()
                .zip(weights.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        });
        worst = worst.max(rel_err(analytic.as_slice(), numeric.as_slice()));
    }
    worst
}

/// Inputs whose entries stay at least `margin` away from zero, so ReLU kinks
/// are not straddled by the finite-difference step.
fn away_from_zero(x: Matrix, margin: f64) -> Matrix {
    x.map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}

pub fn primitive_checks() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut worst = |name: &'static str, f: &dyn Fn(u64) -> f64| {
        let w = (0..TRIALS as u64).map(f).fold(0.0, f64::max);
        out.push((name, w));
    };
    worst("matmul", &|s| {
        let mut r = rng(100 + s);
        let (m, k, n) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        check_primitive(Primitive::MatMul, &[gaussian(&mut r, m, k, 1.0), gaussian(&mut r, k, n, 1.0)], s)
    });
    worst("bias_add", &|s| {
        let mut r = rng(200 + s);
        let (m, n) = (r.random_range(1..6), r.random_range(1..6));
        check_primitive(Primitive::BiasAdd, &[gaussian(&mut r, m, n, 1.0), gaussian(&mut r, 1, n, 1.0)], s)
    });
    worst("relu", &|s| {
        let mut r = rng(300 + s);
        let x = away_from_zero(gaussian(&mut r, 4, 5, 1.0), 1e-3);
        check_primitive(Primitive::Relu, &[x], s)
    });
    worst("row_normalize", &|s| {
        let mut r = rng(400 + s);
        let (m, n) = (r.random_range(1..6), r.random_range(2..6));
        check_primitive(Primitive::RowNormalize, &[gaussian(&mut r, m, n, 2.0)], s)
    });
    worst("log_sum_exp", &|s| {
        let mut r = rng(500 + s);
        let (m, n) = (r.random_range(1..6), r.random_range(1..6));
        check_primitive(Primitive::LogSumExp, &[gaussian(&mut r, m, n, 3.0)], s)
    });
    worst("gather_rows", &|s| {
        let mut r = rng(600 + s);
        let (m, n) = (r.random_range(1..6), r.random_range(1..6));
        let idx = labels(&mut r, m, n);
        check_primitive(Primitive::GatherRows(idx), &[gaussian(&mut r, m, n, 1.0)], s)
    });
    worst("scale", &|s| {
        let mut r = rng(700 + s);
        let c = r.random_range(-3.0..3.0);
        check_primitive(Primitive::Scale(c), &[gaussian(&mut r, 3, 4, 1.0)], s)
    });
    worst("add", &|s| {
        let mut r = rng(800 + s);
        check_primitive(Primitive::Add, &[gaussian(&mut r, 3, 4, 1.0), gaussian(&mut r, 3, 4, 1.0)], s)
    });
    out
}

fn check_loss(x: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    rel_err(analytic.as_slice(), numeric_grad(x, f).as_slice())
}

/// Logits whose row norms sit clearly on one side of `bound`.
fn clip_logits(r: &mut rand_chacha::ChaCha8Rng, m: usize, c: usize, bound: f64) -> Matrix {
    let mut x = gaussian(r, m, c, 1.0);
    for i in 0..m {
        let target = if r.random_bool(0.5) {
            bound * r.random_range(0.2..0.8)
        } else {
            bound * r.random_range(1.5..4.0)
        };
        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        x.row_mut(i).iter_mut().for_each(|v| *v *= target / n);
    }
    x
}

pub fn loss_checks() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut worst = |name: &'static str, f: &dyn Fn(u64) -> f64| {
        let w = (0..TRIALS as u64).map(f).fold(0.0, f64::max);
        out.push((name, w));
    };
    worst("ce", &|s| {
        let mut r = rng(1000 + s);
        let (m, c) = (r.random_range(1..12), r.random_range(2..8));
        let x = gaussian(&mut r, m, c, 2.0);
        let y = labels(&mut r, m, c);
        let g = ce_loss(&x, &y).unwrap().grad;
        check_loss(&x, &g, |x| ce_loss(x, &y).unwrap().value)
    });
    for (name, den) in [("kcl", Denominator::ExcludeSelf), ("kcl_include_self", Denominator::IncludeSelf)] {
        worst(name, &move |s| {
            let mut r = rng(2000 + s);
            let m = r.random_range(3..12);
            let k = r.random_range(1..m);
            let t = r.random_range(0.1..1.0);
            let d = r.random_range(2..7);
            let f = gaussian(&mut r, m, d, 1.5);
            let nbs = batch_neighborhoods(&gaussian(&mut r, m, 4, 1.0), k).unwrap();
            let g = kcl_loss(&f, &nbs, t, den).unwrap().grad;
            check_loss(&f, &g, |x| kcl_loss(x, &nbs, t, den).unwrap().value)
        });
    }
    worst("symce", &|s| {
        let mut r = rng(3000 + s);
        let (m, c) = (r.random_range(1..12), r.random_range(2..8));
        let x = gaussian(&mut r, m, c, 2.0);
        let y = labels(&mut r, m, c);
        let (a, b) = (r.random_range(0.0..2.0), r.random_range(0.0..2.0));
        let g = symce_loss(&x, &y, a, b).unwrap().grad;
        check_loss(&x, &g, |x| symce_loss(x, &y, a, b).unwrap().value)
    });
    worst("logitclip_ce", &|s| {
        let mut r = rng(4000 + s);
        let (m, c) = (r.random_range(1..12), r.random_range(2..8));
        let bound = r.random_range(0.5..3.0);
        let x = clip_logits(&mut r, m, c, bound);
        let y = labels(&mut r, m, c);
        let clipped = logitclip(&x, bound);
        let g = logitclip_backward(&x, bound, &ce_loss(&clipped, &y).unwrap().grad);
        check_loss(&x, &g, |x| ce_loss(&logitclip(x, bound), &y).unwrap().value)
    });
    worst("akd", &|s| {
        let mut r = rng(5000 + s);
        let (m, d) = (r.random_range(1..10), r.random_range(1..6));
        // keep |a − z| away from the kink at zero
        let z = gaussian(&mut r, m, d, 1.0);
        let mut a = gaussian(&mut r, m, d, 1.0);
        for (av, zv) in a.as_mut_slice().iter_mut().zip(z.as_slice()) {
            if (*av - zv).abs() < 1e-3 {
                *av += 1e-2;
            }
        }
        let w = r.random_range(0.1..10.0);
        let g = akd_loss(&a, &z, w).unwrap().grad;
        check_loss(&a, &g, |x| akd_loss(x, &z, w).unwrap().value)
    });
    out
}

/// Full-model checks: flat parameter gradient of each method's batch
/// objective.
pub fn model_checks() -> Vec<(&'static str, f64)> {
    let methods = [
        ("model_fedavg_ce", Method::FedAvgCe),
        ("model_ours", Method::Ours),
        ("model_symce", Method::SymCe),
        ("model_logitclip", Method::LogitClip),
        ("model_akd", Method::Akd),
    ];
    let mut out = Vec::new();
    for (name, method) in methods {
        let w = (0..TRIALS as u64)
            .map(|s| {
                let mut r = rng(6000 + s);
                let (m, din, c, dz) = (r.random_range(6..12), 5, 4, 3);
                let mut spec = MlpSpec::new(din, vec![6, 5], c).unwrap();
                if method == Method::Akd {
                    spec = spec.with_adapter(dz);
                }
                // jitter so zero biases do not put dead-unit samples on a ReLU kink
                let mut params = ModelParams::init(&spec, s).unwrap();
                for v in params.flat_mut() {
                    *v += 0.05 * r.random_range(-1.0..1.0);
                }
                let x = gaussian(&mut r, m, din, 1.0);
                let y = labels(&mut r, m, c);
                let z = gaussian(&mut r, m, dz, 1.0).normalize_rows();
                let cfg = LossConfig {
                    k: 3,
                    logitclip_bound: 0.3,
                    ..LossConfig::with_method(method)
                };
                let loss_at = |flat: &[f64]| -> f64 {
                    let p = ModelParams::unflatten(&spec, flat.to_vec()).unwrap();
                    let out = p.forward(&x).unwrap();
                    batch_objective(&out, &y, Some(&z), &cfg).unwrap().total
                };
                let mut tape = GradTape::new();
                let taped = params.forward_taped(&x, &mut tape).unwrap();
                let loss = batch_objective(&taped.outputs(&tape), &y, Some(&z), &cfg).unwrap();
                let analytic = params.backward(&tape, &taped, loss.grads).unwrap();
                let flat = Matrix::from_vec(1, spec.num_params(), params.flatten().to_vec()).unwrap();
                let numeric = numeric_grad(&flat, |f| loss_at(f.as_slice()));
                rel_err(&analytic, numeric.as_slice())
            })
            .fold(0.0, f64::max);
        out.push((name, w));
    }
    out
}
