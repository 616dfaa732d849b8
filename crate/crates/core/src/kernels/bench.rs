//! Wall-clock GEMV timing with storage accounting.

use std::time::Instant;

use serde::Serialize;

use super::gemv::{dequantize_matrix, gemv_fused, gemv_reference, QuantizedMatrix};
use crate::error::{RazerError, Result};
use crate::quantizer::WEIGHT_GROUP_SIZE;
use crate::synth::normal_vec;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    /// `NxK`.
    pub shape: String,
    pub path: String,
    pub median_ns: u128,
    /// Packed 4-bit code bytes.
    pub payload_bytes: u64,
    /// The same matrix stored as FP16.
    pub baseline_bytes: u64,
}

pub fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || RazerError::InvalidArgument(format!("shape {s:?} is not NxK"));
    let (n, k) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    let k: usize = k.trim().parse().map_err(|_| bad())?;
    if n == 0 || k == 0 {
        return Err(bad());
    }
    Ok((n, k))
}

fn median_ns(reps: usize, mut f: impl FnMut()) -> u128 {
    let mut t: Vec<u128> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos()
        })
        .collect();
    t.sort_unstable();
    t[t.len() / 2]
}

/// Fused output bit-equals the reference product on the dequantized matrix.
pub fn self_check(wq: &QuantizedMatrix, x: &[f32]) -> Result<bool> {
    let dense = dequantize_matrix(wq)?;
    let a = gemv_fused(wq, x)?;
    let b = gemv_reference(&dense, x)?;
    Ok(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()))
}

/// Time the fused and reference paths on random FP4 matrices, one row per
/// shape and path. With `check`, a fused/reference mismatch is an error.
pub fn bench_gemv(shapes: &[(usize, usize)], reps: usize, seed: u64, check: bool) -> Result<Vec<BenchRow>> {
    if reps < 3 {
        return Err(RazerError::InvalidArgument(format!("reps must be at least 3, got {reps}")));
    }
    let mut rows = Vec::with_capacity(2 * shapes.len());
    for (i, &(n, k)) in shapes.iter().enumerate() {
        let wq = QuantizedMatrix::random(n, k, WEIGHT_GROUP_SIZE, seed.wrapping_add(i as u64))?;
        let x = normal_vec(k, seed.wrapping_add(i as u64) ^ 0x5eed);
        let dense = dequantize_matrix(&wq)?;
        if check && !self_check(&wq, &x)? {
            return Err(RazerError::Corrupt(format!("fused and reference GEMV differ at {n}x{k}")));
        }
        let payload = wq.payload_bytes() as u64;
        let baseline = (n * k * 2) as u64;
        let fused = median_ns(reps, || {
            std::hint::black_box(gemv_fused(&wq, std::hint::black_box(&x)).unwrap());
        });
        let reference = median_ns(reps, || {
            std::hint::black_box(gemv_reference(&dense, std::hint::black_box(&x)).unwrap());
        });
        for (path, t) in [("fused", fused), ("reference", reference)] {
            rows.push(BenchRow {
                shape: format!("{n}x{k}"),
                path: path.into(),
                median_ns: t,
                payload_bytes: payload,
                baseline_bytes: baseline,
            });
        }
    }
    Ok(rows)
}
