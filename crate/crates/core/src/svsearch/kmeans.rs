//! One-dimensional Lloyd k-means with seeded farthest-point initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Centroids in ascending order.
    pub centroids: Vec<f64>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
}

fn nearest(x: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    for (i, c) in centroids.iter().enumerate() {
        if (x - c).abs() < (x - centroids[best]).abs() {
            best = i;
        }
    }
    best
}

/// First center drawn with `seed`; each next center is the point farthest
/// from all chosen ones (lowest index on ties). Needs `k` distinct values.
fn farthest_point_init(points: &[f64], k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    while centers.len() < k {
        let mut pick = 0;
        let mut pick_d = -1.0;
        for (i, &p) in points.iter().enumerate() {
            let d = centers
                .iter()
                .map(|c| (p - c).abs())
                .fold(f64::INFINITY, f64::min);
            if d > pick_d {
                pick = i;
                pick_d = d;
            }
        }
        centers.push(points[pick]);
    }
    centers
}

/// Cluster `points` into `k` groups. Returns `None` when fewer than `k`
/// distinct values exist.
pub fn kmeans_1d(points: &[f64], k: usize, seed: u64, max_iter: usize) -> Option<KMeans> {
    let mut distinct = points.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if k == 0 || distinct.len() < k {
        return None;
    }
    let mut centroids = farthest_point_init(points, k, seed);
    let mut assign = vec![usize::MAX; points.len()];
    let mut wcss_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        let mut wcss = 0.0;
        for (a, &p) in assign.iter_mut().zip(points) {
            let c = nearest(p, &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
            wcss += (p - centroids[c]).powi(2);
        }
        wcss_history.push(wcss);
        if !changed && iterations > 1 {
            break;
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&a, &p) in assign.iter().zip(points) {
            sums[a] += p;
            counts[a] += 1;
        }
        for j in 0..k {
            // Empty clusters keep their previous position.
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
    }
    centroids.sort_by(f64::total_cmp);
    Some(KMeans {
        centroids,
        wcss_history,
        iterations,
    })
}
