//! In-batch nearest neighbours in the frozen SSL embedding space.
//!
//! For every anchor the `K` closest other rows of the batch become its
//! positives and everything else its negatives. Distances are exact squared
//! Euclidean distances; ties go to the lower batch position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Positive and negative batch positions for one anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub anchor: usize,
    /// Nearest first.
    pub positives: Vec<usize>,
    /// Ascending batch position.
    pub negatives: Vec<usize>,
}

/// Builds one [`Neighborhood`] per batch row.
pub fn batch_neighborhoods(ssl_batch: &Matrix, k: usize) -> Result<Vec<Neighborhood>> {
    let m = ssl_batch.rows();
    if k == 0 || k >= m {
        return Err(Error::config(format!(
            "K={k} needs a batch of at least K+1 samples, got {m}"
        )));
    }
    let dist = pairwise_sq_distances(ssl_batch);
    let mut order: Vec<usize> = Vec::with_capacity(m);
    Ok((0..m)
        .map(|anchor| {
            let row = &dist[anchor * m..(anchor + 1) * m];
            order.clear();
            order.extend((0..m).filter(|&j| j != anchor));
            let closer = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
            order.select_nth_unstable_by(k - 1, closer);
            order[..k].sort_by(closer);
            let positives = order[..k].to_vec();
            let mut negatives = order[k..].to_vec();
            negatives.sort_unstable();
            Neighborhood {
                anchor,
                positives,
                negatives,
            }
        })
        .collect())
}

fn pairwise_sq_distances(x: &Matrix) -> Vec<f64> {
    let m = x.rows();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[i * m + j] = d;
            out[j * m + i] = d;
        }
    }
    out
}
