//! Minimal `.nt` tensor files: magic `NTSR`, u8 dtype (0 = f32, 1 = f16),
//! u8 ndim, u64 dims, then the little-endian payload.

use std::io::{Read, Write};

use crate::error::{RazerError, Result};
use crate::numerics::{half_decode, half_encode, HalfBits};

pub const NT_MAGIC: [u8; 4] = *b"NTSR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NtDtype {
    F32 = 0,
    F16 = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NtTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NtTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(RazerError::LengthMismatch {
                expected: numel,
                actual: data.len(),
            });
        }
        Ok(NtTensor { dims, data })
    }
}

pub fn to_bytes(t: &NtTensor, dtype: NtDtype) -> Result<Vec<u8>> {
    if t.dims.len() > u8::MAX as usize {
        return Err(RazerError::InvalidArgument(format!("{} dimensions", t.dims.len())));
    }
    if t.dims.iter().product::<usize>() != t.data.len() {
        return Err(RazerError::LengthMismatch {
            expected: t.dims.iter().product(),
            actual: t.data.len(),
        });
    }
    let mut out = Vec::with_capacity(6 + 8 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(&NT_MAGIC);
    out.push(dtype as u8);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        NtDtype::F32 => t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        NtDtype::F16 => t
            .data
            .iter()
            .for_each(|&v| out.extend_from_slice(&half_encode(v as f64).0.to_le_bytes())),
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<NtTensor> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(RazerError::Truncated {
                needed: n,
                available: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(6)?;
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != NT_MAGIC {
        return Err(RazerError::BadMagic {
            expected: NT_MAGIC,
            found: magic,
        });
    }
    let width = match bytes[4] {
        0 => 4,
        1 => 2,
        t => return Err(RazerError::UnknownDtype(t)),
    };
    let ndim = bytes[5] as usize;
    need(6 + 8 * ndim)?;
    let dims: Vec<usize> = bytes[6..6 + 8 * ndim]
        .chunks_exact(8)
        .map(|c| {
            let d = u64::from_le_bytes(c.try_into().unwrap());
            usize::try_from(d).map_err(|_| RazerError::Corrupt(format!("dimension {d}")))
        })
        .collect::<Result<_>>()?;
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| RazerError::Corrupt("shape overflows".into()))?;
    let start = 6 + 8 * ndim;
    let end = numel
        .checked_mul(width)
        .and_then(|b| b.checked_add(start))
        .ok_or_else(|| RazerError::Corrupt("shape overflows".into()))?;
    need(end)?;
    if bytes.len() > end {
        return Err(RazerError::TrailingBytes(bytes.len() - end));
    }
    let payload = &bytes[start..end];
    let data: Vec<f32> = if width == 4 {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| half_decode(HalfBits(u16::from_le_bytes([c[0], c[1]]))))
            .collect::<Result<_>>()?
    };
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(RazerError::NonFinite { index });
    }
    Ok(NtTensor { dims, data })
}

pub fn read_nt<R: Read>(source: &mut R) -> Result<NtTensor> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn write_nt<W: Write>(t: &NtTensor, dtype: NtDtype, sink: &mut W) -> Result<()> {
    sink.write_all(&to_bytes(t, dtype)?)?;
    Ok(())
}
