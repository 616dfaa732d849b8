//! Shared fixtures for the criterion benches.

use razer_core::codec::pack_fp4;
use razer_core::kernels::QuantizedMatrix;
use razer_core::PackedFp4Block;

/// Linear-layer shapes timed by the GEMV bench.
pub const GEMV_SHAPES: [(usize, usize); 3] = [(4096, 4096), (11008, 4096), (13824, 5120)];

/// `n` pseudo-random FP4 codes (SplitMix-style), packed.
pub fn random_block(n: usize, seed: u64) -> PackedFp4Block {
    let mut s = seed;
    let codes: Vec<u8> = (0..n)
        .map(|_| {
            s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let z = (s ^ (s >> 31)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            (z >> 60) as u8
        })
        .collect();
    pack_fp4(&codes).expect("codes are 4-bit")
}

pub fn random_matrix(n: usize, k: usize, seed: u64) -> QuantizedMatrix {
    QuantizedMatrix::random(n, k, 128, seed).expect("valid shape")
}
