//! Lloyd's k-means with random-point initialization.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Tensor,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &Tensor) -> usize {
    let mut best = (f64::INFINITY, 0);
    for c in 0..centroids.rows() {
        let d = sq_dist(p, centroids.row(c));
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Clusters the rows of `points` into `k` groups.
///
/// Initial centroids are `k` distinct rows drawn uniformly; an emptied
/// cluster keeps its previous centroid. Stops when assignments stabilize or
/// after `max_iter` rounds.
pub fn kmeans<R: Rng>(points: &Tensor, k: usize, max_iter: usize, rng: &mut R) -> Result<KMeans> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("k-means with k={k} over {n} points")));
    }
    let d = points.cols();
    let init = sample(rng, n, k).into_vec();
    let mut cdata = Vec::with_capacity(k * d);
    for &i in &init {
        cdata.extend_from_slice(points.row(i));
    }
    let mut centroids = Tensor::new(vec![k, d], cdata)?;
    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let c = nearest(points.row(i), &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let c = centroids.data_mut();
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..d {
                    c[j * d + t] = sums[j * d + t] / counts[j] as f64;
                }
            }
        }
    }
    Ok(KMeans {
        assignments,
        centroids,
        iterations,
    })
}

/// Share of points that belong to their cluster's most common label.
pub fn majority_purity(assignments: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(assignments.len(), labels.len());
    if assignments.is_empty() {
        return 0.0;
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k * n_labels];
    for (&a, &l) in assignments.iter().zip(labels) {
        counts[a * n_labels + l] += 1;
    }
    let majority: usize = (0..k)
        .map(|c| {
            counts[c * n_labels..(c + 1) * n_labels]
                .iter()
                .copied()
                .max()
                .unwrap_or(0)
        })
        .sum();
    majority as f64 / assignments.len() as f64
}
