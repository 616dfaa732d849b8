//! RaZeR quantization: FP4 and FP3 grids whose redundant negative-zero code
//! is remapped to a per-group special value chosen from a small calibrated
//! table.
//!
//! - [`numerics`]: half-precision helpers and the FP4/FP3/INT grids.
//! - [`quantizer`]: group-wise INT, FP and RaZeR quantization.
//! - [`svsearch`]: special-value sweeps, search and clustering.
//! - [`codec`]: bit packing and the `RZR1` container.
//! - [`fastcast`]: code to FP16 conversion.
//! - [`kernels`]: fused GEMV, the buffered KV cache and benchmarks.

pub mod codec;
pub mod error;
pub mod fastcast;
pub mod kernels;
pub mod numerics;
pub mod quantizer;
pub mod svsearch;
pub mod synth;
pub mod tensor;

pub use codec::{effective_bits, Fp3Planes, PackedFp4Block};
pub use error::{RazerError, Result};
pub use fastcast::SvHalfTable;
pub use kernels::{KvCacheState, KvFormat, QuantizedMatrix};
pub use numerics::{fp3_grid, fp4_grid, int_grid, DatatypeSpec, HalfBits};
pub use quantizer::{
    dequantize_tensor, quantize_tensor, Dtype, GroupParams, QuantConfig, QuantizedGroup, QuantizedTensor,
};
pub use svsearch::{CalibrationConfig, CalibrationReport, LayerSpec, SearchRange, SvSet};
pub use tensor::Matrix;
