//! Seeded synthetic data: Gaussian tensors, planted-outlier layers and
//! half-precision token streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::round_to_half;
use crate::tensor::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` independent standard normal samples.
pub fn normal_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

pub fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix {
        rows,
        cols,
        data: normal_vec(rows * cols, seed),
    }
}

/// Standard normal samples rounded to half precision, as a KV stream would be.
pub fn half_normal_vec(n: usize, r: &mut impl Rng) -> Vec<f32> {
    (0..n)
        .map(|_| round_to_half(StandardNormal.sample(r)))
        .collect()
}

/// Gaussian layer where every group of `group_size` along each row carries
/// one outlier at `direction * 9 * sigma_group`. `direction` is +1 or -1.
pub fn planted_outlier_layer(
    rows: usize,
    cols: usize,
    group_size: usize,
    direction: f32,
    seed: u64,
) -> Matrix {
    let mut m = normal_matrix(rows, cols, seed);
    let mut r = rng(seed ^ 0x9E37_79B9_7F4A_7C15);
    for row in m.data.chunks_mut(cols) {
        for group in row.chunks_mut(group_size) {
            let n = group.len() as f64;
            let mean = group.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = group.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let at = r.random_range(0..group.len());
            group[at] = direction * 9.0 * var.sqrt() as f32;
        }
    }
    m
}
