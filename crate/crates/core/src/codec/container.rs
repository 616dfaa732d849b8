//! The `RZR1` container: a self-describing little-endian file holding one
//! quantized tensor.
//!
//! ```text
//! magic "RZR1" | version u16 | dtype u8 | group_size u32 | ndim u8
//! dims u64 x ndim | tail_len u32 | sv_table f32 x 4
//! scales u16 (half) x groups | sv_indices 2 bits x groups
//! zero_points u8 x groups        (integer dtypes only)
//! payload                        (nibbles, or 48-byte FP3 planes per group)
//! ```

use std::io::{Read, Write};

use super::pack::{
    pack_fp3, pack_fp4, pack_sv_indices, unpack_fp3, unpack_sv_indices, Fp3Planes,
    PackedFp4Block, FP3_GROUP, FP3_GROUP_BYTES,
};
use crate::error::{RazerError, Result};
use crate::numerics::{half_decode, half_encode, HalfBits};
use crate::quantizer::{group_layout, Dtype, GroupParams, QuantConfig, QuantizedGroup, QuantizedTensor};
use crate::svsearch::SvSet;

pub const MAGIC: [u8; 4] = *b"RZR1";
pub const VERSION: u16 = 1;

/// Section sizes in bytes, all derivable from the header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub header: usize,
    pub sv_table: usize,
    pub scales: usize,
    pub sv_indices: usize,
    pub zero_points: usize,
    pub payload: usize,
}

impl Layout {
    pub fn new(dtype: Dtype, ndim: usize, groups: usize, group_size: usize) -> Self {
        let int = matches!(dtype, Dtype::Int4 | Dtype::Int3);
        Layout {
            header: 4 + 2 + 1 + 4 + 1 + 8 * ndim + 4,
            sv_table: 16,
            scales: 2 * groups,
            sv_indices: groups.div_ceil(4),
            zero_points: if int { groups } else { 0 },
            payload: match dtype {
                Dtype::Fp3Razer => groups * FP3_GROUP_BYTES,
                _ => PackedFp4Block::bytes_for(groups * group_size),
            },
        }
    }

    pub fn total(&self) -> usize {
        self.header + self.sv_table + self.scales + self.sv_indices + self.zero_points + self.payload
    }

    /// Everything except the code payload.
    pub fn metadata(&self) -> usize {
        self.total() - self.payload
    }
}

fn check_compat(dtype: Dtype, group_size: usize) -> Result<()> {
    if group_size < 2 || group_size > u32::MAX as usize {
        return Err(RazerError::InvalidArgument(format!("group size {group_size}")));
    }
    if dtype == Dtype::Fp3Razer && group_size != FP3_GROUP {
        return Err(RazerError::InvalidArgument(format!(
            "fp3rzr storage needs group size {FP3_GROUP}, got {group_size}"
        )));
    }
    Ok(())
}

/// Serialize `qt` to container bytes.
pub fn to_bytes(qt: &QuantizedTensor) -> Result<Vec<u8>> {
    let dtype = qt.config.dtype;
    let g = qt.config.group_size;
    check_compat(dtype, g)?;
    if qt.dims.len() > u8::MAX as usize {
        return Err(RazerError::InvalidArgument(format!("{} dimensions", qt.dims.len())));
    }
    let (rows, _, per_row, tail) = group_layout(&qt.dims, g)?;
    let n = rows * per_row;
    if qt.groups.len() != n || qt.tail_len != tail {
        return Err(RazerError::Corrupt(format!(
            "tensor holds {} groups with tail {}, shape implies {n} with tail {tail}",
            qt.groups.len(),
            qt.tail_len
        )));
    }
    let layout = Layout::new(dtype, qt.dims.len(), n, g);
    let mut out = Vec::with_capacity(layout.total());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.tag());
    out.extend_from_slice(&(g as u32).to_le_bytes());
    out.push(qt.dims.len() as u8);
    for &d in &qt.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(tail as u32).to_le_bytes());

    let table = match (dtype.is_razer(), &qt.sv_set) {
        (true, Some(s)) => *s.values(),
        (true, None) => {
            return Err(RazerError::InvalidArgument(format!(
                "{} tensor without a special-value set",
                dtype.name()
            )))
        }
        (false, _) => [0.0; 4],
    };
    for v in table {
        out.extend_from_slice(&v.to_le_bytes());
    }

    let mut sv_idx = Vec::with_capacity(n);
    let mut zps = Vec::new();
    for q in &qt.groups {
        if q.codes.len() != g {
            return Err(RazerError::LengthMismatch {
                expected: g,
                actual: q.codes.len(),
            });
        }
        let (scale, idx) = match (dtype, q.params) {
            (Dtype::Int4 | Dtype::Int3, GroupParams::Int { scale, zero_point, bits }) if bits == dtype.bits() => {
                zps.push(zero_point);
                (scale, 0)
            }
            (Dtype::Fp4Razer | Dtype::Fp3Razer, GroupParams::Razer { scale, sv_index }) => (scale, sv_index),
            _ => {
                return Err(RazerError::InvalidArgument(format!(
                    "group parameters do not match dtype {}",
                    dtype.name()
                )))
            }
        };
        let h = half_encode(scale as f64);
        if h.to_f32_unchecked() != scale || !(scale > 0.0) {
            return Err(RazerError::InvalidArgument(format!(
                "scale {scale} is not a positive half-precision value"
            )));
        }
        out.extend_from_slice(&h.0.to_le_bytes());
        sv_idx.push(idx);
    }
    out.extend(pack_sv_indices(&sv_idx)?);
    out.extend_from_slice(&zps);

    let spec = dtype.spec();
    if dtype == Dtype::Fp3Razer {
        for q in &qt.groups {
            out.extend_from_slice(&pack_fp3(&q.codes)?.to_le_bytes());
        }
    } else {
        let mut codes = Vec::with_capacity(n * g);
        for q in &qt.groups {
            if let Some(&c) = q.codes.iter().find(|&&c| !valid_code(dtype, c)) {
                return Err(RazerError::InvalidCode {
                    code: c,
                    dtype: spec.name(),
                });
            }
            codes.extend_from_slice(&q.codes);
        }
        out.extend(pack_fp4(&codes)?.to_le_bytes());
    }
    debug_assert_eq!(out.len(), layout.total());
    Ok(out)
}

fn valid_code(dtype: Dtype, c: u8) -> bool {
    let spec = dtype.spec();
    spec.is_valid_code(c) || (dtype.is_razer() && spec.reserved_code() == Some(c))
}

pub fn write_container<W: Write>(qt: &QuantizedTensor, sink: &mut W) -> Result<()> {
    sink.write_all(&to_bytes(qt)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(RazerError::Truncated {
                needed: self.pos + n,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse container bytes. Every length is derived from the header and the
/// input must end exactly where the payload does.
pub fn from_bytes(bytes: &[u8]) -> Result<QuantizedTensor> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(RazerError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(RazerError::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_tag(c.u8()?)?;
    let g = c.u32()? as usize;
    check_compat(dtype, g).map_err(|e| RazerError::Corrupt(e.to_string()))?;
    let ndim = c.u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = c.u64()?;
        dims.push(usize::try_from(d).map_err(|_| RazerError::Corrupt(format!("dimension {d}")))?);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| RazerError::Corrupt("shape overflows".into()))?;
    if ndim == 0 || numel == 0 {
        return Err(RazerError::Corrupt(format!("empty shape {dims:?}")));
    }
    let (rows, _, per_row, tail) = group_layout(&dims, g)?;
    let tail_len = c.u32()? as usize;
    if tail_len != tail {
        return Err(RazerError::Corrupt(format!(
            "tail length {tail_len} disagrees with shape (expected {tail})"
        )));
    }
    let n = rows
        .checked_mul(per_row)
        .ok_or_else(|| RazerError::Corrupt("group count overflows".into()))?;
    let layout = Layout::new(dtype, ndim, n, g);
    let remaining = bytes.len() - c.pos;
    let expected_rest = layout.total() - layout.header;
    if remaining < expected_rest {
        return Err(RazerError::Truncated {
            needed: layout.total(),
            available: bytes.len(),
        });
    }
    if remaining > expected_rest {
        return Err(RazerError::TrailingBytes(remaining - expected_rest));
    }

    let mut table = [0f32; 4];
    for v in &mut table {
        *v = f32::from_le_bytes(c.take(4)?.try_into().unwrap());
    }
    let sv_set = if dtype.is_razer() {
        Some(SvSet::new(table, dtype.spec())?)
    } else {
        if table != [0.0; 4] || table.iter().any(|v| v.is_sign_negative()) {
            return Err(RazerError::Corrupt("integer container with a special-value table".into()));
        }
        None
    };

    let mut scales = Vec::with_capacity(n);
    for _ in 0..n {
        let h = HalfBits(c.u16()?);
        let s = half_decode(h)?;
        if !(s > 0.0) {
            return Err(RazerError::Corrupt(format!("non-positive scale {h:?}")));
        }
        scales.push(s);
    }
    let sv_idx = unpack_sv_indices(c.take(layout.sv_indices)?, n)?;
    let zps = c.take(layout.zero_points)?;

    let spec = dtype.spec();
    let payload = c.take(layout.payload)?;
    let mut groups = Vec::with_capacity(n);
    let block = match dtype {
        Dtype::Fp3Razer => None,
        _ => Some(PackedFp4Block::from_le_bytes(payload, n * g)?),
    };
    for i in 0..n {
        let codes = match &block {
            None => {
                let chunk: &[u8; FP3_GROUP_BYTES] = payload[i * FP3_GROUP_BYTES..(i + 1) * FP3_GROUP_BYTES]
                    .try_into()
                    .unwrap();
                unpack_fp3(&Fp3Planes::from_le_bytes(chunk))
            }
            Some(b) => (i * g..(i + 1) * g).map(|k| b.get(k)).collect(),
        };
        if let Some(&bad) = codes.iter().find(|&&code| !valid_code(dtype, code)) {
            return Err(RazerError::InvalidCode {
                code: bad,
                dtype: spec.name(),
            });
        }
        let params = match dtype {
            Dtype::Int4 | Dtype::Int3 => {
                if sv_idx[i] != 0 {
                    return Err(RazerError::Corrupt(format!("group {i}: sv index on integer data")));
                }
                let zp = zps[i];
                if zp as u32 >= 1 << dtype.bits() {
                    return Err(RazerError::Corrupt(format!("group {i}: zero point {zp}")));
                }
                GroupParams::Int {
                    scale: scales[i],
                    zero_point: zp,
                    bits: dtype.bits(),
                }
            }
            _ => GroupParams::Razer {
                scale: scales[i],
                sv_index: sv_idx[i],
            },
        };
        groups.push(QuantizedGroup { codes, params });
    }
    Ok(QuantizedTensor {
        dims,
        config: QuantConfig::new(dtype, g),
        sv_set,
        groups,
        tail_len,
    })
}

pub fn read_container<R: Read>(source: &mut R) -> Result<QuantizedTensor> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
