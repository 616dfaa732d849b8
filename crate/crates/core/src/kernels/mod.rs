//! GEMV over packed weights, the buffered KV cache and a timing harness.

pub mod bench;
pub mod gemv;
pub mod kv;

pub use bench::{bench_gemv, BenchRow};
pub use gemv::{gemv_fused, gemv_reference, QuantizedMatrix};
pub use kv::{attention, simulate_kv, KvCacheState, KvFormat, KvSimConfig, KvStep};
