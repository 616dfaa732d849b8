//! Buffered KV-cache quantization: tokens accumulate at full precision and
//! are quantized a block at a time once the buffer holds `n_b` tokens.

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{RazerError, Result};
use crate::numerics::round_to_half;
use crate::quantizer::{dequantize_tensor, quantize_tensor, Dtype, QuantConfig, QuantizedTensor, KV_GROUP_SIZE};
use crate::svsearch::SvSet;
use crate::synth;

pub const DEFAULT_KV_BUFFER: usize = 64;

/// Storage format of flushed blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KvFormat {
    /// Values rounded to half precision, no quantization.
    Fp16,
    Quantized(Dtype),
}

impl std::str::FromStr for KvFormat {
    type Err = RazerError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fp16" {
            Ok(KvFormat::Fp16)
        } else {
            s.parse().map(KvFormat::Quantized)
        }
    }
}

#[derive(Clone, Debug)]
pub struct KvBlock {
    /// Quantized keys and values; `None` in fp16 mode.
    pub keys_q: Option<QuantizedTensor>,
    pub values_q: Option<QuantizedTensor>,
    /// Reconstructed `n_b x dim` keys and values.
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct KvCacheState {
    dim: usize,
    capacity: usize,
    group_size: usize,
    format: KvFormat,
    sv_set: Option<SvSet>,
    buf_keys: Vec<f32>,
    buf_values: Vec<f32>,
    blocks: Vec<KvBlock>,
}

impl KvCacheState {
    pub fn new(dim: usize, capacity: usize, group_size: usize, format: KvFormat, sv_set: Option<SvSet>) -> Result<Self> {
        if dim == 0 || capacity == 0 || group_size < 2 {
            return Err(RazerError::InvalidArgument(format!(
                "dim {dim}, buffer {capacity}, group size {group_size}"
            )));
        }
        if let KvFormat::Quantized(d) = format {
            if d.is_razer() && sv_set.is_none() {
                return Err(RazerError::InvalidArgument(format!(
                    "{} needs a special-value set",
                    d.name()
                )));
            }
        }
        Ok(KvCacheState {
            dim,
            capacity,
            group_size,
            format,
            sv_set,
            buf_keys: Vec::new(),
            buf_values: Vec::new(),
            blocks: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn buffered(&self) -> usize {
        self.buf_keys.len() / self.dim
    }

    pub fn blocks(&self) -> &[KvBlock] {
        &self.blocks
    }

    /// Number of block quantizations so far.
    pub fn flush_events(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.capacity * self.blocks.len() + self.buffered()
    }

    /// Append one token. Returns true when the append filled the buffer and
    /// triggered a block quantization.
    pub fn append(&mut self, k: &[f32], v: &[f32]) -> Result<bool> {
        for x in [k, v] {
            if x.len() != self.dim {
                return Err(RazerError::LengthMismatch {
                    expected: self.dim,
                    actual: x.len(),
                });
            }
            if let Some(index) = x.iter().position(|t| !t.is_finite()) {
                return Err(RazerError::NonFinite { index });
            }
        }
        self.buf_keys.extend_from_slice(k);
        self.buf_values.extend_from_slice(v);
        if self.buffered() < self.capacity {
            return Ok(false);
        }
        let keys = std::mem::take(&mut self.buf_keys);
        let values = std::mem::take(&mut self.buf_values);
        let block = match self.format {
            KvFormat::Fp16 => KvBlock {
                keys_q: None,
                values_q: None,
                keys: keys.iter().map(|&x| round_to_half(x)).collect(),
                values: values.iter().map(|&x| round_to_half(x)).collect(),
            },
            KvFormat::Quantized(dtype) => {
                let cfg = QuantConfig::new(dtype, self.group_size);
                let dims = [self.capacity, self.dim];
                let sv = if dtype.is_razer() { self.sv_set.as_ref() } else { None };
                let kq = quantize_tensor(&keys, &dims, &cfg, sv)?;
                let vq = quantize_tensor(&values, &dims, &cfg, sv)?;
                KvBlock {
                    keys: dequantize_tensor(&kq)?,
                    values: dequantize_tensor(&vq)?,
                    keys_q: Some(kq),
                    values_q: Some(vq),
                }
            }
        };
        self.blocks.push(block);
        Ok(true)
    }

    /// Softmax attention of `q` over all cached tokens: reconstructed blocks
    /// first, then the full-precision buffer.
    pub fn attention(&self, q: &[f32]) -> Result<Vec<f32>> {
        if self.total_tokens() == 0 {
            return Err(RazerError::Empty("kv cache"));
        }
        let mut keys = Vec::with_capacity(self.total_tokens() * self.dim);
        let mut values = Vec::with_capacity(keys.capacity());
        for b in &self.blocks {
            keys.extend_from_slice(&b.keys);
            values.extend_from_slice(&b.values);
        }
        keys.extend_from_slice(&self.buf_keys);
        values.extend_from_slice(&self.buf_values);
        attention(&keys, &values, self.dim, q)
    }
}

/// `softmax(q . K^T / sqrt(dim)) V` for row-major `tokens x dim` matrices,
/// accumulated in `f64`.
pub fn attention(keys: &[f32], values: &[f32], dim: usize, q: &[f32]) -> Result<Vec<f32>> {
    if q.len() != dim {
        return Err(RazerError::LengthMismatch {
            expected: dim,
            actual: q.len(),
        });
    }
    if keys.len() != values.len() || keys.len() % dim != 0 {
        return Err(RazerError::LengthMismatch {
            expected: keys.len(),
            actual: values.len(),
        });
    }
    if keys.is_empty() {
        return Err(RazerError::Empty("keys"));
    }
    let inv = 1.0 / (dim as f64).sqrt();
    let scores: Vec<f64> = keys
        .chunks_exact(dim)
        .map(|k| k.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * inv)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0f64; dim];
    for (w, v) in weights.iter().zip(values.chunks_exact(dim)) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * x as f64;
        }
    }
    Ok(out.iter().map(|o| (o / total) as f32).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KvSimConfig {
    pub tokens: usize,
    pub dim: usize,
    pub buffer: usize,
    pub group_size: usize,
    pub format: KvFormat,
    pub seed: u64,
}

impl KvSimConfig {
    pub fn new(tokens: usize, dim: usize, format: KvFormat, seed: u64) -> Self {
        KvSimConfig {
            tokens,
            dim,
            buffer: DEFAULT_KV_BUFFER,
            group_size: KV_GROUP_SIZE,
            format,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KvStep {
    pub step: usize,
    pub tokens: usize,
    pub flush_events: usize,
    pub flushed: bool,
    /// L2 distance between cached and full-precision attention outputs.
    pub attn_error: f64,
}

/// Stream `tokens` half-exact N(0,1) key/value pairs through a cache and
/// compare attention against the exact stream after every append. The
/// stream and queries depend only on the seed, not on the format.
pub fn simulate_kv(cfg: &KvSimConfig, sv_set: Option<SvSet>) -> Result<Vec<KvStep>> {
    let mut state = KvCacheState::new(cfg.dim, cfg.buffer, cfg.group_size, cfg.format, sv_set)?;
    let mut rng = synth::rng(cfg.seed);
    let mut draw = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| round_to_half(StandardNormal.sample(&mut rng)))
            .collect()
    };
    let mut all_k = Vec::with_capacity(cfg.tokens * cfg.dim);
    let mut all_v = Vec::with_capacity(cfg.tokens * cfg.dim);
    let mut steps = Vec::with_capacity(cfg.tokens);
    for step in 0..cfg.tokens {
        let k = draw(cfg.dim);
        let v = draw(cfg.dim);
        let q = draw(cfg.dim);
        all_k.extend_from_slice(&k);
        all_v.extend_from_slice(&v);
        let flushed = state.append(&k, &v)?;
        let exact = attention(&all_k, &all_v, cfg.dim, &q)?;
        let got = state.attention(&q)?;
        let attn_error = exact
            .iter()
            .zip(&got)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        steps.push(KvStep {
            step,
            tokens: state.total_tokens(),
            flush_events: state.flush_events(),
            flushed,
            attn_error,
        });
    }
    Ok(steps)
}
