#![allow(dead_code)]

pub mod gradcheck;
pub mod stats;

use fedks::knn::Neighborhood;
use fedks::numcore::Matrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + FD_EPS;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - FD_EPS;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        g.as_mut_slice()[i] = (up - down) / (2.0 * FD_EPS);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-6)`. The floor keeps rounding noise on an
/// identically zero gradient from reading as a 100% error.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// Selection-sort neighbourhoods: repeatedly take the closest remaining
/// index, lower index first on equal distance.
pub fn brute_neighborhoods(ssl: &Matrix, k: usize) -> Vec<Neighborhood> {
    let m = ssl.rows();
    (0..m)
        .map(|j| {
            let dist = |l: usize| -> f64 {
                ssl.row(j)
                    .iter()
                    .zip(ssl.row(l))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            };
            let mut remaining: Vec<usize> = (0..m).filter(|&l| l != j).collect();
            let mut positives = Vec::with_capacity(k);
            for _ in 0..k {
                let mut best = 0;
                for pos in 1..remaining.len() {
                    let (a, b) = (dist(remaining[pos]), dist(remaining[best]));
                    if a < b || (a == b && remaining[pos] < remaining[best]) {
                        best = pos;
                    }
                }
                positives.push(remaining.remove(best));
            }
            remaining.sort_unstable();
            Neighborhood {
                anchor: j,
                positives,
                negatives: remaining,
            }
        })
        .collect()
}

/// A batch in which some rows are exact copies of earlier rows.
pub fn batch_with_duplicates(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Matrix {
    let mut x = gaussian(rng, m, d, 1.0);
    for r in 1..m {
        if rng.random_bool(0.3) {
            let src = rng.random_range(0..r);
            let row = x.row(src).to_vec();
            x.row_mut(r).copy_from_slice(&row);
        }
    }
    x
}

/// Haar-ish random rotation from Gram–Schmidt on a Gaussian matrix.
pub fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let g = gaussian(rng, d, d, 1.0);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    for r in 0..d {
        let mut v = g.row(r).to_vec();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    Matrix::from_rows(&q)
}
