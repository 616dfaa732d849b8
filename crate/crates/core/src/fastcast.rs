//! Conversion of RaZeR codes to half-precision bit patterns.
//!
//! The FP4 code layout `{E, M, S}` is chosen so that `0x38 + (code & 0xE)`
//! is already the upper byte of the FP16 encoding of the magnitude, and the
//! code's low bit is the sign. The only non-arithmetic cases are the two
//! codes whose magnitude field is `001`: positive becomes zero and negative
//! becomes the group's special value. Both are resolved with masks.

use crate::codec::pack::{Fp3Planes, PackedFp4Block, FP3_GROUP};
use crate::error::{RazerError, Result};
use crate::numerics::{fp3_grid, fp4_grid, half_encode, HalfBits};
use crate::svsearch::SvSet;

/// Special values as FP16 bit patterns, indexed by the per-group 2-bit index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SvHalfTable(pub [u16; 4]);

impl Default for SvHalfTable {
    /// `{5, 8, -5, -8}`.
    fn default() -> Self {
        SvHalfTable([0x4500, 0x4800, 0xC500, 0xC800])
    }
}

impl SvHalfTable {
    /// Every storage-grid value (multiple of 0.5 up to 15.5) is exact in half
    /// precision, so this conversion never rounds.
    pub fn from_svset(set: &SvSet) -> Self {
        SvHalfTable(set.values().map(|v| half_encode(v as f64).0))
    }

    #[inline]
    pub fn get(&self, sv_idx: u8) -> u16 {
        self.0[(sv_idx & 3) as usize]
    }
}

const ZERO_SLOT: u16 = 0x3A00;
const SV_SLOT: u16 = 0xBA00;

/// Branch-free FP4 decode with the special value pre-selected.
#[inline(always)]
fn fp4_fast(code: u8, sv: u16) -> u16 {
    let code = code as u16;
    let v = (code << 15) | ((0x38 + (code & 0xE)) << 8);
    let is_zero = ((v == ZERO_SLOT) as u16).wrapping_neg();
    let is_sv = ((v == SV_SLOT) as u16).wrapping_neg();
    (v & !(is_zero | is_sv)) | (sv & is_sv)
}

pub fn razer4_to_half_fast(code: u8, sv_idx: u8, table: &SvHalfTable) -> HalfBits {
    HalfBits(fp4_fast(code & 0xF, table.get(sv_idx)))
}

/// 16-entry decode table per special-value index, built from the FP4 grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fp4Lut([[u16; 16]; 4]);

impl Fp4Lut {
    pub fn new(table: &SvHalfTable) -> Self {
        let spec = fp4_grid();
        let mut lut = [[0u16; 16]; 4];
        for (idx, row) in lut.iter_mut().enumerate() {
            for (code, slot) in row.iter_mut().enumerate() {
                *slot = match spec.value_of_code(code as u8) {
                    Some(v) => half_encode(v as f64).0,
                    None => table.0[idx],
                };
            }
        }
        Fp4Lut(lut)
    }

    #[inline]
    pub fn get(&self, code: u8, sv_idx: u8) -> HalfBits {
        HalfBits(self.0[(sv_idx & 3) as usize][(code & 0xF) as usize])
    }
}

/// Lookup-based decode; builds the table on every call. Use [`Fp4Lut`]
/// directly in loops.
pub fn razer4_to_half_lookup(code: u8, sv_idx: u8, table: &SvHalfTable) -> HalfBits {
    Fp4Lut::new(table).get(code, sv_idx)
}

/// Input to the FP4 encoder: a grid value or the group's special value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fp4Symbol {
    Value(f32),
    Special,
}

pub fn encode_half_to_razer4(symbol: Fp4Symbol) -> Result<u8> {
    let spec = fp4_grid();
    match symbol {
        Fp4Symbol::Special => Ok(spec.reserved_code().expect("fp4 has a reserved code")),
        Fp4Symbol::Value(v) => spec.code_of_value(v).ok_or(RazerError::NotRepresentable(v)),
    }
}

#[inline]
fn half_to_f32(h: u16) -> f32 {
    HalfBits(h).to_f32_unchecked()
}

/// Decode `out.len()` codes of `block` starting at `start`, multiplying by
/// `scale` in `f32`.
#[inline]
pub fn cast_fp4_into(block: &PackedFp4Block, start: usize, sv_idx: u8, table: &SvHalfTable, scale: f32, out: &mut [f32]) {
    let sv = table.get(sv_idx);
    for (i, o) in out.iter_mut().enumerate() {
        *o = half_to_f32(fp4_fast(block.get(start + i), sv)) * scale;
    }
}

/// Same as [`cast_fp4_into`] through the 16-entry table.
#[inline]
pub fn cast_fp4_lookup_into(block: &PackedFp4Block, start: usize, sv_idx: u8, lut: &Fp4Lut, scale: f32, out: &mut [f32]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = half_to_f32(lut.get(block.get(start + i), sv_idx).0) * scale;
    }
}

/// Decode a whole block with one special-value index and scale.
pub fn batch_cast(block: &PackedFp4Block, sv_idx: u8, table: &SvHalfTable, scale: f32) -> Result<Vec<f32>> {
    if block.words.len() != block.count.div_ceil(8) {
        return Err(RazerError::LengthMismatch {
            expected: block.count.div_ceil(8),
            actual: block.words.len(),
        });
    }
    let mut out = vec![0f32; block.count];
    cast_fp4_into(block, 0, sv_idx, table, scale, &mut out);
    Ok(out)
}

/// 8-entry FP3 decode table for one special value.
pub fn fp3_half_table(sv: u16) -> [u16; 8] {
    let spec = fp3_grid();
    let mut t = [0u16; 8];
    for (code, slot) in t.iter_mut().enumerate() {
        *slot = spec
            .value_of_code(code as u8)
            .map_or(sv, |v| half_encode(v as f64).0);
    }
    t
}

pub fn razer3_to_half(planes: &Fp3Planes, index: usize, sv_idx: u8, table: &SvHalfTable) -> Result<HalfBits> {
    if index >= FP3_GROUP {
        return Err(RazerError::InvalidArgument(format!("fp3 element index {index}")));
    }
    Ok(HalfBits(fp3_half_table(table.get(sv_idx))[planes.code(index) as usize]))
}

/// Branch-free FP3 decode: exponent `E` maps to `(14 + E) << 10`, and the
/// `E = 0` slot is patched to zero or the special value like FP4.
#[inline(always)]
fn fp3_fast(code: u8, sv: u16) -> u16 {
    let code = code as u16;
    let v = (code << 15) | ((0x38 + ((code & 0x6) << 1)) << 8);
    let is_zero = ((v == 0x3800) as u16).wrapping_neg();
    let is_sv = ((v == 0xB800) as u16).wrapping_neg();
    (v & !(is_zero | is_sv)) | (sv & is_sv)
}

/// Decode one FP3 group, multiplying by `scale` in `f32`.
pub fn batch_cast_fp3(planes: &Fp3Planes, sv_idx: u8, table: &SvHalfTable, scale: f32) -> Vec<f32> {
    let sv = table.get(sv_idx);
    (0..FP3_GROUP)
        .map(|i| half_to_f32(fp3_fast(planes.code(i), sv)) * scale)
        .collect()
}
