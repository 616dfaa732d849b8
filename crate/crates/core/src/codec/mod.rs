//! Packed storage: code packing, the `RZR1` container, the `.nt` tensor
//! format and the effective-bits calculator.

pub mod container;
pub mod ntfile;
pub mod pack;

pub use container::{read_container, write_container, Layout};
pub use ntfile::{read_nt, write_nt, NtDtype, NtTensor};
pub use pack::{pack_fp3, pack_fp4, unpack_fp3, unpack_fp4, Fp3Planes, PackedFp4Block};

use crate::error::{RazerError, Result};

/// Bits per element once per-group scale and metadata bits are amortized
/// over the group.
pub fn effective_bits(code_bits: u32, group_size: u32, scale_bits: u32, meta_bits: u32) -> Result<f64> {
    if code_bits == 0 || group_size == 0 {
        return Err(RazerError::InvalidArgument(
            "code bits and group size must be positive".into(),
        ));
    }
    Ok(code_bits as f64 + (scale_bits + meta_bits) as f64 / group_size as f64)
}
