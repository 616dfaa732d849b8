//! Half-precision bit patterns and the canonical low-bit quantization grids.
//!
//! FP4 (E2M1) and FP3 (E2M0) codes use the `{E, M, S}` layout: the sign sits
//! in the least-significant bit so a single shift moves it into the FP16 sign
//! position. The encoding that would be negative zero is reserved for the
//! per-group special value.

use std::fmt;
use std::sync::OnceLock;

use half::f16;

use crate::error::{RazerError, Result};

/// A raw IEEE 754 binary16 bit pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct HalfBits(pub u16);

impl HalfBits {
    pub const ZERO: HalfBits = HalfBits(0x0000);
    pub const MAX: HalfBits = HalfBits(0x7BFF);

    #[inline]
    pub fn is_finite(self) -> bool {
        self.0 & 0x7C00 != 0x7C00
    }

    /// Decode without the NaN/Inf check. Used on hot paths where the pattern
    /// is known to come from a finite table.
    #[inline]
    pub fn to_f32_unchecked(self) -> f32 {
        f16::from_bits(self.0).to_f32()
    }
}

impl fmt::Debug for HalfBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HalfBits({:#06x})", self.0)
    }
}

/// Nearest binary16 value (ties to even). Magnitudes beyond the largest
/// finite half saturate to ±65504.
pub fn half_encode(x: f64) -> HalfBits {
    debug_assert!(!x.is_nan(), "half_encode on NaN");
    let h = f16::from_f64(x);
    if h.is_infinite() {
        if x.is_sign_negative() {
            HalfBits(0xFBFF)
        } else {
            HalfBits::MAX
        }
    } else {
        HalfBits(h.to_bits())
    }
}

/// Exact real value of a finite half pattern, subnormals included.
pub fn half_decode(h: HalfBits) -> Result<f32> {
    if !h.is_finite() {
        return Err(RazerError::NonFiniteHalf(h.0));
    }
    Ok(h.to_f32_unchecked())
}

/// Round `x` to the nearest half-representable value, returned as `f32`.
#[inline]
pub fn round_to_half(x: f32) -> f32 {
    half_encode(x as f64).to_f32_unchecked()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    /// Uniform integer levels `0..2^n`, used with a scale and zero point.
    Int,
    /// Mini-float levels with a reserved special-value code.
    Float,
}

/// A named quantization grid: ordered representable values and the binary
/// code assigned to each.
#[derive(Clone, Debug, PartialEq)]
pub struct DatatypeSpec {
    name: &'static str,
    kind: GridKind,
    bits: u8,
    grid: Vec<f32>,
    codes: Vec<u8>,
    reserved: Option<u8>,
    decode: [Option<f32>; 16],
}

impl DatatypeSpec {
    fn build(
        name: &'static str,
        kind: GridKind,
        bits: u8,
        mut pairs: Vec<(f32, u8)>,
        reserved: Option<u8>,
    ) -> Self {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut decode = [None; 16];
        for &(v, c) in &pairs {
            debug_assert!(decode[c as usize].is_none(), "duplicate code");
            decode[c as usize] = Some(v);
        }
        let (grid, codes) = pairs.into_iter().unzip();
        DatatypeSpec {
            name,
            kind,
            bits,
            grid,
            codes,
            reserved,
            decode,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Representable values, strictly increasing.
    pub fn grid(&self) -> &[f32] {
        &self.grid
    }

    /// Code of the grid value at `index`.
    pub fn code_at(&self, index: usize) -> u8 {
        self.codes[index]
    }

    /// The code standing for the special value, if this is a RaZeR grid.
    pub fn reserved_code(&self) -> Option<u8> {
        self.reserved
    }

    pub fn zero_code(&self) -> u8 {
        self.code_of_value(0.0).expect("grid contains zero")
    }

    /// Grid value for `code`; `None` for the reserved slot and out-of-range codes.
    #[inline]
    pub fn value_of_code(&self, code: u8) -> Option<f32> {
        self.decode.get(code as usize).copied().flatten()
    }

    pub fn code_of_value(&self, value: f32) -> Option<u8> {
        self.grid
            .iter()
            .position(|&v| v == value)
            .map(|i| self.codes[i])
    }

    pub fn contains(&self, value: f32) -> bool {
        self.grid.contains(&value)
    }

    /// True when `code` is either a grid code or the reserved code.
    pub fn is_valid_code(&self, code: u8) -> bool {
        self.value_of_code(code).is_some() || self.reserved == Some(code)
    }

    /// Largest positive level.
    pub fn max_value(&self) -> f32 {
        *self.grid.last().unwrap()
    }

    /// Most negative level (for INT grids this is 0).
    pub fn min_value(&self) -> f32 {
        self.grid[0]
    }
}

/// FP4 E2M1 magnitudes indexed by the 3-bit `{E, M}` field. Index 1 is the
/// zero / special slot; 0.5 is moved to index 0 so no subnormal fix-up is
/// needed when casting to FP16.
const FP4_EM_MAGNITUDES: [f32; 8] = [0.5, 0.0, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

/// FP3 E2M0 magnitudes indexed by the 2-bit exponent (bias 1, E=0 is zero).
const FP3_E_MAGNITUDES: [f32; 4] = [0.0, 1.0, 2.0, 4.0];

fn float_grid(name: &'static str, bits: u8, magnitudes: &[f32]) -> DatatypeSpec {
    let mut pairs = Vec::new();
    let mut reserved = None;
    for (field, &m) in magnitudes.iter().enumerate() {
        let pos = (field as u8) << 1;
        if m == 0.0 {
            pairs.push((0.0, pos));
            reserved = Some(pos | 1);
        } else {
            pairs.push((m, pos));
            pairs.push((-m, pos | 1));
        }
    }
    DatatypeSpec::build(name, GridKind::Float, bits, pairs, reserved)
}

/// FP4 E2M1 with RaZeR code assignment: 15 values, code `0b0011` reserved.
pub fn fp4_grid() -> &'static DatatypeSpec {
    static SPEC: OnceLock<DatatypeSpec> = OnceLock::new();
    SPEC.get_or_init(|| float_grid("fp4", 4, &FP4_EM_MAGNITUDES))
}

/// FP3 E2M0 with `{E, S}` layout: `{0, ±1, ±2, ±4}`, code `0b001` reserved.
pub fn fp3_grid() -> &'static DatatypeSpec {
    static SPEC: OnceLock<DatatypeSpec> = OnceLock::new();
    SPEC.get_or_init(|| float_grid("fp3", 3, &FP3_E_MAGNITUDES))
}

/// Unsigned integer levels `0..2^bits` with the identity code map.
pub fn int_grid(bits: u8) -> &'static DatatypeSpec {
    static INT3: OnceLock<DatatypeSpec> = OnceLock::new();
    static INT4: OnceLock<DatatypeSpec> = OnceLock::new();
    let make = |name, bits: u8| {
        let pairs = (0..1u8 << bits).map(|c| (c as f32, c)).collect();
        DatatypeSpec::build(name, GridKind::Int, bits, pairs, None)
    };
    match bits {
        3 => INT3.get_or_init(|| make("int3", 3)),
        4 => INT4.get_or_init(|| make("int4", 4)),
        _ => panic!("unsupported integer width {bits}"),
    }
}

/// Index and value of the grid member closest to `x`. Ties go to the member
/// of smaller magnitude.
#[inline]
pub fn nearest_grid_value(x: f32, grid: &[f32]) -> (usize, f32) {
    debug_assert!(!grid.is_empty());
    let hi = grid.partition_point(|&v| v < x);
    if hi == 0 {
        return (0, grid[0]);
    }
    if hi == grid.len() {
        return (hi - 1, grid[hi - 1]);
    }
    let (lo_v, hi_v) = (grid[hi - 1], grid[hi]);
    let d_lo = x - lo_v;
    let d_hi = hi_v - x;
    if d_lo < d_hi || (d_lo == d_hi && lo_v.abs() <= hi_v.abs()) {
        (hi - 1, lo_v)
    } else {
        (hi, hi_v)
    }
}
