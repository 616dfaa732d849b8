//! Matrix-vector products over packed FP4 RaZeR weights.

use rand::Rng;
use rayon::prelude::*;

use crate::codec::pack::{pack_fp4, PackedFp4Block};
use crate::error::{RazerError, Result};
use crate::fastcast::{cast_fp4_into, cast_fp4_lookup_into, Fp4Lut, SvHalfTable};
use crate::numerics::{fp4_grid, round_to_half};
use crate::quantizer::{
    group_layout, quantize_tensor, Dtype, GroupParams, QuantConfig, QuantizedGroup, QuantizedTensor,
};
use crate::svsearch::SvSet;
use crate::synth;
use crate::tensor::Matrix;

/// FP4 RaZeR weights, `rows x cols`, grouped along `cols` with every row's
/// last group padded to `group_size` codes.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub scales: Vec<f32>,
    pub sv_indices: Vec<u8>,
    pub codes: PackedFp4Block,
    pub sv_set: SvSet,
    pub sv_table: SvHalfTable,
}

impl QuantizedMatrix {
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn quantize(w: &Matrix, group_size: usize, sv_set: &SvSet) -> Result<Self> {
        let qt = quantize_tensor(
            &w.data,
            &[w.rows, w.cols],
            &QuantConfig::new(Dtype::Fp4Razer, group_size),
            Some(sv_set),
        )?;
        Self::from_tensor(&qt)
    }

    pub fn from_tensor(qt: &QuantizedTensor) -> Result<Self> {
        if qt.config.dtype != Dtype::Fp4Razer || qt.dims.len() != 2 {
            return Err(RazerError::InvalidArgument(
                "a quantized matrix needs a 2-D fp4rzr tensor".into(),
            ));
        }
        let sv_set = qt.sv_set.ok_or(RazerError::InvalidSvSet("missing".into()))?;
        let mut scales = Vec::with_capacity(qt.groups.len());
        let mut sv_indices = Vec::with_capacity(qt.groups.len());
        let mut codes = Vec::with_capacity(qt.groups.len() * qt.config.group_size);
        for q in &qt.groups {
            let GroupParams::Razer { scale, sv_index } = q.params else {
                return Err(RazerError::WrongParams {
                    expected: "razer",
                    found: "other",
                });
            };
            scales.push(scale);
            sv_indices.push(sv_index);
            codes.extend_from_slice(&q.codes);
        }
        Ok(QuantizedMatrix {
            rows: qt.dims[0],
            cols: qt.dims[1],
            group_size: qt.config.group_size,
            scales,
            sv_indices,
            codes: pack_fp4(&codes)?,
            sv_set,
            sv_table: SvHalfTable::from_svset(&sv_set),
        })
    }

    /// Random codes, indices and half-exact scales, for benchmarks at shapes
    /// too large to quantize quickly.
    pub fn random(rows: usize, cols: usize, group_size: usize, seed: u64) -> Result<Self> {
        if rows == 0 || cols == 0 || group_size < 2 {
            return Err(RazerError::InvalidArgument(format!(
                "shape {rows}x{cols} with group size {group_size}"
            )));
        }
        let mut rng = synth::rng(seed);
        let n = rows * cols.div_ceil(group_size);
        let (_, _, per_row, tail) = group_layout(&[rows, cols], group_size)?;
        let zero = fp4_grid().zero_code();
        let mut codes = Vec::with_capacity(n * group_size);
        for gi in 0..n {
            let valid = if gi % per_row == per_row - 1 { tail } else { group_size };
            codes.extend((0..valid).map(|_| rng.random_range(0..16u8)));
            codes.resize(codes.len() + group_size - valid, zero);
        }
        let set = SvSet::fp4_default();
        Ok(QuantizedMatrix {
            rows,
            cols,
            group_size,
            scales: (0..n).map(|_| round_to_half(rng.random_range(0.005f32..0.05))).collect(),
            sv_indices: (0..n).map(|_| rng.random_range(0..4u8)).collect(),
            codes: pack_fp4(&codes)?,
            sv_set: set,
            sv_table: SvHalfTable::from_svset(&set),
        })
    }

    pub fn to_tensor(&self) -> QuantizedTensor {
        let g = self.group_size;
        let groups = (0..self.scales.len())
            .map(|i| QuantizedGroup {
                codes: (i * g..(i + 1) * g).map(|k| self.codes.get(k)).collect(),
                params: GroupParams::Razer {
                    scale: self.scales[i],
                    sv_index: self.sv_indices[i],
                },
            })
            .collect();
        let per_row = self.groups_per_row();
        QuantizedTensor {
            dims: vec![self.rows, self.cols],
            config: QuantConfig::new(Dtype::Fp4Razer, g),
            sv_set: Some(self.sv_set),
            groups,
            tail_len: self.cols - (per_row - 1) * g,
        }
    }

    /// Bytes of packed codes, padding included.
    pub fn payload_bytes(&self) -> usize {
        self.codes.byte_len()
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.cols {
            return Err(RazerError::LengthMismatch {
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn row_fused(&self, r: usize, x: &[f32], buf: &mut [f32], lut: Option<&Fp4Lut>) -> f32 {
        let g = self.group_size;
        let per_row = self.groups_per_row();
        let mut acc = 0f32;
        for j in 0..per_row {
            let gi = r * per_row + j;
            let len = g.min(self.cols - j * g);
            let w = &mut buf[..len];
            match lut {
                None => cast_fp4_into(&self.codes, gi * g, self.sv_indices[gi], &self.sv_table, self.scales[gi], w),
                Some(l) => cast_fp4_lookup_into(&self.codes, gi * g, self.sv_indices[gi], l, self.scales[gi], w),
            }
            for (wk, xk) in w.iter().zip(&x[j * g..j * g + len]) {
                acc += wk * xk;
            }
        }
        acc
    }
}

/// Fused dequantize-and-multiply. Each row accumulates in `f32`, strictly
/// left to right; rows run in parallel.
pub fn gemv_fused(wq: &QuantizedMatrix, x: &[f32]) -> Result<Vec<f32>> {
    wq.check_input(x)?;
    Ok((0..wq.rows)
        .into_par_iter()
        .map_init(
            || vec![0f32; wq.group_size],
            |buf, r| wq.row_fused(r, x, buf, None),
        )
        .collect())
}

/// [`gemv_fused`] decoding through the 16-entry lookup table.
pub fn gemv_fused_lookup(wq: &QuantizedMatrix, x: &[f32]) -> Result<Vec<f32>> {
    wq.check_input(x)?;
    let lut = Fp4Lut::new(&wq.sv_table);
    Ok((0..wq.rows)
        .into_par_iter()
        .map_init(
            || vec![0f32; wq.group_size],
            |buf, r| wq.row_fused(r, x, buf, Some(&lut)),
        )
        .collect())
}

/// Dense product with the same per-row accumulation order as the fused path.
pub fn gemv_reference(w: &Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != w.cols {
        return Err(RazerError::LengthMismatch {
            expected: w.cols,
            actual: x.len(),
        });
    }
    Ok((0..w.rows)
        .into_par_iter()
        .map(|r| {
            let mut acc = 0f32;
            for (a, b) in w.row(r).iter().zip(x) {
                acc += a * b;
            }
            acc
        })
        .collect())
}

/// Dequantize through the quantizer's own decoder (independent of the fast cast).
pub fn dequantize_matrix(wq: &QuantizedMatrix) -> Result<Matrix> {
    let data = crate::quantizer::dequantize_tensor(&wq.to_tensor())?;
    Matrix::new(wq.rows, wq.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{normal_matrix, normal_vec};
    use proptest::prelude::*;

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn grid_exact_identity_like() {
        // Diagonal of grid values; off-diagonal zeros.
        let n = 16;
        let grid = fp4_grid().grid();
        let mut data = vec![0f32; n * 128];
        for r in 0..n {
            data[r * 128 + r] = grid[r % grid.len()];
            data[r * 128 + 127] = 6.0;
        }
        let w = Matrix::new(n, 128, data).unwrap();
        let wq = QuantizedMatrix::quantize(&w, 128, &SvSet::fp4_default()).unwrap();
        assert_eq!(dequantize_matrix(&wq).unwrap(), w);
        let x = normal_vec(128, 3);
        let y = gemv_fused(&wq, &x).unwrap();
        assert_eq!(bits(&y), bits(&gemv_reference(&w, &x).unwrap()));
    }

    #[test]
    fn zero_input() {
        let wq = QuantizedMatrix::quantize(&normal_matrix(8, 200, 1), 128, &SvSet::manual()).unwrap();
        assert!(gemv_fused(&wq, &[0.0; 200]).unwrap().iter().all(|&v| v == 0.0));
        assert!(gemv_fused(&wq, &[0.0; 10]).is_err());
    }

    #[test]
    fn random_matches_reference() {
        let w = normal_matrix(64, 256, 9);
        let wq = QuantizedMatrix::quantize(&w, 128, &SvSet::fp4_default()).unwrap();
        let x = normal_vec(256, 10);
        let d = dequantize_matrix(&wq).unwrap();
        assert_eq!(bits(&gemv_fused(&wq, &x).unwrap()), bits(&gemv_reference(&d, &x).unwrap()));
        assert_eq!(bits(&gemv_fused_lookup(&wq, &x).unwrap()), bits(&gemv_reference(&d, &x).unwrap()));
    }

    #[test]
    fn tensor_roundtrip() {
        let wq = QuantizedMatrix::random(5, 300, 128, 4).unwrap();
        assert_eq!(QuantizedMatrix::from_tensor(&wq.to_tensor()).unwrap(), wq);
        assert_eq!(wq.payload_bytes(), 5 * 3 * 128 / 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn fused_equals_reference(n in 1usize..24, k in 2usize..400, g in prop::sample::select(vec![16usize, 32, 64, 128]), seed in 0u64..1000) {
            let wq = QuantizedMatrix::random(n, k, g, seed).unwrap();
            let x = normal_vec(k, seed + 1);
            let d = dequantize_matrix(&wq).unwrap();
            prop_assert_eq!(bits(&gemv_fused(&wq, &x).unwrap()), bits(&gemv_reference(&d, &x).unwrap()));
        }
    }
}
