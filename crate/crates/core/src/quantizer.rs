//! Group-wise quantizers: asymmetric integer, plain mini-float, and RaZeR
//! (mini-float plus one per-group special value chosen from a 4-entry set).
//!
//! Every scale produced here is representable in half precision, so a
//! quantized tensor survives a trip through the container format unchanged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RazerError, Result};
use crate::numerics::{fp3_grid, fp4_grid, int_grid, nearest_grid_value, round_to_half, DatatypeSpec};
use crate::svsearch::SvSet;

/// Default group size for weight quantization.
pub const WEIGHT_GROUP_SIZE: usize = 128;
/// Default group size for KV-cache quantization.
pub const KV_GROUP_SIZE: usize = 64;

/// Clip ratios tried by [`search_clip_ratio`] when the caller has no preference.
pub const DEFAULT_CLIP_CANDIDATES: [f32; 7] = [1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7];

/// Storable datatypes. The discriminant is the container dtype tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Int4 = 0,
    Int3 = 1,
    #[serde(rename = "fp4rzr")]
    Fp4Razer = 2,
    #[serde(rename = "fp3rzr")]
    Fp3Razer = 3,
}

impl Dtype {
    pub const ALL: [Dtype; 4] = [Dtype::Int4, Dtype::Int3, Dtype::Fp4Razer, Dtype::Fp3Razer];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Dtype::ALL
            .into_iter()
            .find(|d| d.tag() == tag)
            .ok_or(RazerError::UnknownDtype(tag))
    }

    pub fn spec(self) -> &'static DatatypeSpec {
        match self {
            Dtype::Int4 => int_grid(4),
            Dtype::Int3 => int_grid(3),
            Dtype::Fp4Razer => fp4_grid(),
            Dtype::Fp3Razer => fp3_grid(),
        }
    }

    pub fn bits(self) -> u8 {
        self.spec().bits()
    }

    pub fn is_razer(self) -> bool {
        matches!(self, Dtype::Fp4Razer | Dtype::Fp3Razer)
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::Int4 => "int4",
            Dtype::Int3 => "int3",
            Dtype::Fp4Razer => "fp4rzr",
            Dtype::Fp3Razer => "fp3rzr",
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = RazerError;

    fn from_str(s: &str) -> Result<Self> {
        Dtype::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| RazerError::InvalidArgument(format!("unknown dtype {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Mse,
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub dtype: Dtype,
    pub group_size: usize,
    /// Upper clip ratio (scales the positive extreme).
    pub alpha: f32,
    /// Lower clip ratio (integer quantization only).
    pub beta: f32,
    pub metric: Metric,
    /// Per-group grid search over [`DEFAULT_CLIP_CANDIDATES`] instead of a fixed `alpha`.
    pub clip_search: bool,
}

impl QuantConfig {
    pub fn new(dtype: Dtype, group_size: usize) -> Self {
        QuantConfig {
            dtype,
            group_size,
            alpha: 1.0,
            beta: 1.0,
            metric: Metric::Mse,
            clip_search: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(RazerError::InvalidArgument(format!(
                "group size must be at least 2, got {}",
                self.group_size
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(RazerError::InvalidArgument(format!(
                    "{name} must lie in (0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-group quantization parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GroupParams {
    Int { scale: f32, zero_point: u8, bits: u8 },
    Fp { scale: f32 },
    Razer { scale: f32, sv_index: u8 },
}

impl GroupParams {
    pub fn scale(&self) -> f32 {
        match *self {
            GroupParams::Int { scale, .. }
            | GroupParams::Fp { scale }
            | GroupParams::Razer { scale, .. } => scale,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            GroupParams::Int { .. } => "int",
            GroupParams::Fp { .. } => "fp",
            GroupParams::Razer { .. } => "razer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGroup {
    pub codes: Vec<u8>,
    pub params: GroupParams,
}

/// A quantization scheme applied to one group.
#[derive(Clone, Copy, Debug)]
pub enum Scheme<'a> {
    Int { bits: u8, beta: f32 },
    Fp(&'a DatatypeSpec),
    Razer(&'a DatatypeSpec, &'a SvSet),
}

/// Snap a positive scale to half precision, keeping it strictly positive and finite.
#[inline]
pub fn fit_scale(raw: f32) -> f32 {
    const MIN_SUBNORMAL: f32 = 5.960_464_5e-8;
    round_to_half(raw).max(MIN_SUBNORMAL)
}

fn check_group(x: &[f32]) -> Result<()> {
    if x.is_empty() {
        return Err(RazerError::Empty("group"));
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(RazerError::NonFinite { index });
    }
    Ok(())
}

fn min_max(x: &[f32]) -> (f32, f32) {
    x.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Asymmetric integer quantization with clip ratios `alpha` (max side) and
/// `beta` (min side). The zero point is clamped into the code range.
pub fn quantize_group_int(x: &[f32], bits: u8, alpha: f32, beta: f32) -> Result<QuantizedGroup> {
    check_group(x)?;
    if !(bits == 3 || bits == 4) {
        return Err(RazerError::InvalidArgument(format!("integer width {bits}")));
    }
    let qmax = ((1u32 << bits) - 1) as f64;
    let (lo, hi) = min_max(x);
    let scale = if hi == lo {
        1.0
    } else {
        let mut raw = (alpha as f64 * hi as f64 - beta as f64 * lo as f64) / qmax;
        if raw <= 0.0 {
            raw = (hi as f64 - lo as f64) / qmax;
        }
        fit_scale(raw as f32)
    };
    let s = scale as f64;
    let zero_point = (-(beta as f64 * lo as f64 / s).round_ties_even()).clamp(0.0, qmax);
    let codes = x
        .iter()
        .map(|&v| ((v as f64 / s).round_ties_even() + zero_point).clamp(0.0, qmax) as u8)
        .collect();
    Ok(QuantizedGroup {
        codes,
        params: GroupParams::Int {
            scale,
            zero_point: zero_point as u8,
            bits,
        },
    })
}

pub fn dequantize_group_int(q: &QuantizedGroup) -> Result<Vec<f32>> {
    match q.params {
        GroupParams::Int {
            scale,
            zero_point,
            bits,
        } => q
            .codes
            .iter()
            .map(|&c| {
                if c >> bits != 0 {
                    return Err(RazerError::InvalidCode {
                        code: c,
                        dtype: "int",
                    });
                }
                Ok((c as i32 - zero_point as i32) as f32 * scale)
            })
            .collect(),
        other => Err(RazerError::WrongParams {
            expected: "int",
            found: other.kind(),
        }),
    }
}

/// Two-sided absmax scale: both extremes of `x` land inside `[-neg_max, pos_max]`.
fn float_scale(x: &[f32], pos_max: f32, neg_max: f32, alpha: f32) -> f32 {
    let (lo, hi) = min_max(x);
    let up = hi.max(0.0) / pos_max;
    let down = (-lo).max(0.0) / neg_max;
    let raw = up.max(down) * alpha;
    if raw == 0.0 {
        1.0
    } else {
        fit_scale(raw)
    }
}

/// Extent of the grid extended by an optional special value.
fn extended_extent(spec: &DatatypeSpec, sv: Option<f32>) -> (f32, f32) {
    let mut pos = spec.max_value();
    let mut neg = -spec.min_value();
    if let Some(sv) = sv {
        if sv > 0.0 {
            pos = pos.max(sv);
        } else {
            neg = neg.max(-sv);
        }
    }
    (pos, neg)
}

/// Reconstruction of a single element at a fixed scale. Returns the code
/// (the reserved code when the special value wins) and the dequantized value.
#[inline]
fn encode_one(v: f32, spec: &DatatypeSpec, sv: Option<f32>, scale: f32) -> (u8, f32) {
    let (idx, g) = nearest_grid_value(v / scale, spec.grid());
    let base = g * scale;
    if let (Some(sv), Some(rc)) = (sv, spec.reserved_code()) {
        let alt = sv * scale;
        let d_base = (v as f64 - base as f64).abs();
        let d_alt = (v as f64 - alt as f64).abs();
        if d_alt < d_base || (d_alt == d_base && sv.abs() < g.abs()) {
            return (rc, alt);
        }
    }
    (spec.code_at(idx), base)
}

fn fixed_scale_error(x: &[f32], spec: &DatatypeSpec, sv: Option<f32>, scale: f32) -> f64 {
    x.iter()
        .map(|&v| {
            let (_, r) = encode_one(v, spec, sv, scale);
            let d = v as f64 - r as f64;
            d * d
        })
        .sum()
}

/// Nearest-value encoding at a caller-chosen scale, on the base grid
/// optionally extended by `sv`. Returns the codes and the summed squared error.
pub fn encode_fixed_scale(
    x: &[f32],
    spec: &DatatypeSpec,
    sv: Option<f32>,
    scale: f32,
) -> (Vec<u8>, f64) {
    let mut err = 0.0;
    let codes = x
        .iter()
        .map(|&v| {
            let (c, r) = encode_one(v, spec, sv, scale);
            let d = v as f64 - r as f64;
            err += d * d;
            c
        })
        .collect();
    (codes, err)
}

/// Per-group special-value selection followed by reconstruction: writes the
/// dequantized group into `out` and returns its squared error. This is the
/// fast path used by calibration, where only reconstructions matter.
pub fn razer_reconstruct(
    x: &[f32],
    spec: &DatatypeSpec,
    candidates: &[f32],
    alpha: f32,
    out: &mut [f32],
) -> f64 {
    let choice = select_special_value(x, spec, candidates, alpha);
    let sv = candidates[choice.index];
    for (o, &v) in out.iter_mut().zip(x) {
        *o = encode_one(v, spec, Some(sv), choice.scale).1;
    }
    choice.error
}

/// Plain mini-float quantization (no special value).
pub fn quantize_group_fp(x: &[f32], spec: &DatatypeSpec, alpha: f32) -> Result<QuantizedGroup> {
    check_group(x)?;
    let (pos, neg) = extended_extent(spec, None);
    let scale = float_scale(x, pos, neg, alpha);
    let (codes, _) = encode_fixed_scale(x, spec, None, scale);
    Ok(QuantizedGroup {
        codes,
        params: GroupParams::Fp { scale },
    })
}

pub fn dequantize_group_fp(q: &QuantizedGroup, spec: &DatatypeSpec) -> Result<Vec<f32>> {
    let GroupParams::Fp { scale } = q.params else {
        return Err(RazerError::WrongParams {
            expected: "fp",
            found: q.params.kind(),
        });
    };
    q.codes
        .iter()
        .map(|&c| {
            spec.value_of_code(c)
                .map(|v| v * scale)
                .ok_or(RazerError::InvalidCode {
                    code: c,
                    dtype: spec.name(),
                })
        })
        .collect()
}

/// Outcome of evaluating every special-value candidate on one group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvChoice {
    pub index: usize,
    pub scale: f32,
    pub error: f64,
}

/// Exhaustive per-group special-value selection: for each candidate, refit
/// the scale on the extended grid and measure squared error. Lowest error
/// wins; ties go to the lowest index.
pub fn select_special_value(
    x: &[f32],
    spec: &DatatypeSpec,
    candidates: &[f32],
    alpha: f32,
) -> SvChoice {
    debug_assert!(!candidates.is_empty());
    let mut best = SvChoice {
        index: 0,
        scale: 1.0,
        error: f64::INFINITY,
    };
    for (index, &sv) in candidates.iter().enumerate() {
        let (pos, neg) = extended_extent(spec, Some(sv));
        let scale = float_scale(x, pos, neg, alpha);
        let error = fixed_scale_error(x, spec, Some(sv), scale);
        if error < best.error {
            best = SvChoice {
                index,
                scale,
                error,
            };
        }
    }
    best
}

/// RaZeR quantization of one group against a special-value set.
pub fn quantize_group_razer(
    x: &[f32],
    spec: &DatatypeSpec,
    sv_set: &SvSet,
    alpha: f32,
) -> Result<QuantizedGroup> {
    check_group(x)?;
    if spec.reserved_code().is_none() {
        return Err(RazerError::InvalidArgument(format!(
            "{} has no reserved special-value code",
            spec.name()
        )));
    }
    let cands = sv_set.values();
    let mut choice = select_special_value(x, spec, cands, alpha);
    let (mut codes, _) = encode_fixed_scale(x, spec, Some(cands[choice.index]), choice.scale);
    // Several candidates can describe the same reconstruction (the special
    // value unused). Take the one a re-quantization of that reconstruction
    // would pick, so quantizing dequantized data reproduces these bytes.
    let recon: Vec<f32> = codes
        .iter()
        .map(|&c| match spec.value_of_code(c) {
            Some(v) => v * choice.scale,
            None => cands[choice.index] * choice.scale,
        })
        .collect();
    let again = select_special_value(&recon, spec, cands, alpha);
    if again.index != choice.index && again.error == 0.0 {
        let (c, _) = encode_fixed_scale(&recon, spec, Some(cands[again.index]), again.scale);
        codes = c;
        choice = again;
    }
    Ok(QuantizedGroup {
        codes,
        params: GroupParams::Razer {
            scale: choice.scale,
            sv_index: choice.index as u8,
        },
    })
}

pub fn dequantize_group_razer(
    q: &QuantizedGroup,
    spec: &DatatypeSpec,
    sv_set: &SvSet,
) -> Result<Vec<f32>> {
    let GroupParams::Razer { scale, sv_index } = q.params else {
        return Err(RazerError::WrongParams {
            expected: "razer",
            found: q.params.kind(),
        });
    };
    let sv = *sv_set
        .values()
        .get(sv_index as usize)
        .ok_or_else(|| RazerError::Corrupt(format!("sv index {sv_index}")))?;
    let reserved = spec.reserved_code();
    q.codes
        .iter()
        .map(|&c| match spec.value_of_code(c) {
            Some(v) => Ok(v * scale),
            None if Some(c) == reserved => Ok(sv * scale),
            None => Err(RazerError::InvalidCode {
                code: c,
                dtype: spec.name(),
            }),
        })
        .collect()
}

/// Quantize one group under `scheme`.
pub fn quantize_group(x: &[f32], scheme: Scheme<'_>, alpha: f32) -> Result<QuantizedGroup> {
    match scheme {
        Scheme::Int { bits, beta } => quantize_group_int(x, bits, alpha, beta),
        Scheme::Fp(spec) => quantize_group_fp(x, spec, alpha),
        Scheme::Razer(spec, svs) => quantize_group_razer(x, spec, svs, alpha),
    }
}

pub fn dequantize_group(q: &QuantizedGroup, scheme: Scheme<'_>) -> Result<Vec<f32>> {
    match scheme {
        Scheme::Int { .. } => dequantize_group_int(q),
        Scheme::Fp(spec) => dequantize_group_fp(q, spec),
        Scheme::Razer(spec, svs) => dequantize_group_razer(q, spec, svs),
    }
}

/// Sum of squared differences.
pub fn mse(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(RazerError::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    Ok(x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum())
}

/// Kullback-Leibler divergence `sum p log(p/q)`, with `0 log 0 = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(RazerError::LengthMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    for (name, d) in [("p", p), ("q", q)] {
        let sum: f64 = d.iter().sum();
        if d.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(RazerError::NotADistribution(format!("{name} sums to {sum}")));
        }
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(RazerError::NotADistribution(
                "q is zero where p is positive".into(),
            ));
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc)
}

/// Grid-search the clip ratio minimizing group error. Ties prefer the ratio
/// closest to 1.
pub fn search_clip_ratio(
    x: &[f32],
    scheme: Scheme<'_>,
    candidates: &[f32],
) -> Result<(f32, QuantizedGroup)> {
    if candidates.is_empty() {
        return Err(RazerError::Empty("clip candidates"));
    }
    if let Some(&bad) = candidates.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
        return Err(RazerError::InvalidArgument(format!("clip ratio {bad}")));
    }
    let mut best: Option<(f32, QuantizedGroup, f64)> = None;
    for &alpha in candidates {
        let q = quantize_group(x, scheme, alpha)?;
        let err = mse(x, &dequantize_group(&q, scheme)?)?;
        let better = match &best {
            None => true,
            Some((a, _, e)) => err < *e || (err == *e && alpha > *a),
        };
        if better {
            best = Some((alpha, q, err));
        }
    }
    let (alpha, q, _) = best.unwrap();
    Ok((alpha, q))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub dims: Vec<usize>,
    pub config: QuantConfig,
    pub sv_set: Option<SvSet>,
    /// Row-major groups: `rows * groups_per_row` entries, each of `group_size` codes.
    pub groups: Vec<QuantizedGroup>,
    /// Valid elements in the last group of each row.
    pub tail_len: usize,
}

/// `(rows, row_len, groups_per_row, tail_len)` for a tensor grouped along its
/// innermost dimension.
pub fn group_layout(dims: &[usize], group_size: usize) -> Result<(usize, usize, usize, usize)> {
    let numel: usize = dims.iter().product();
    if dims.is_empty() || numel == 0 {
        return Err(RazerError::Empty("tensor"));
    }
    let row_len = *dims.last().unwrap();
    let rows = numel / row_len;
    let per_row = row_len.div_ceil(group_size);
    let tail = row_len - (per_row - 1) * group_size;
    Ok((rows, row_len, per_row, tail))
}

impl QuantizedTensor {
    pub fn scheme(&self) -> Result<Scheme<'_>> {
        scheme_for(self.config.dtype, self.config.beta, self.sv_set.as_ref())
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

fn scheme_for(dtype: Dtype, beta: f32, sv_set: Option<&SvSet>) -> Result<Scheme<'_>> {
    Ok(match dtype {
        Dtype::Int4 | Dtype::Int3 => Scheme::Int {
            bits: dtype.bits(),
            beta,
        },
        Dtype::Fp4Razer | Dtype::Fp3Razer => {
            let svs = sv_set.ok_or_else(|| {
                RazerError::InvalidArgument(format!("{} requires a special-value set", dtype.name()))
            })?;
            Scheme::Razer(dtype.spec(), svs)
        }
    })
}

/// Code that reconstructs to zero, used to pad partial groups.
fn pad_code(params: &GroupParams, spec: &DatatypeSpec) -> u8 {
    match *params {
        GroupParams::Int { zero_point, .. } => zero_point,
        _ => spec.zero_code(),
    }
}

/// Quantize `data` (row-major, shape `dims`) in groups along the innermost
/// dimension. Each row's last group is zero-padded to `group_size`; padding
/// never influences scale or special-value selection.
pub fn quantize_tensor(
    data: &[f32],
    dims: &[usize],
    config: &QuantConfig,
    sv_set: Option<&SvSet>,
) -> Result<QuantizedTensor> {
    config.validate()?;
    let (_, row_len, _, tail_len) = group_layout(dims, config.group_size)?;
    if data.len() != dims.iter().product::<usize>() {
        return Err(RazerError::LengthMismatch {
            expected: dims.iter().product(),
            actual: data.len(),
        });
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(RazerError::NonFinite { index });
    }
    let scheme = scheme_for(config.dtype, config.beta, sv_set)?;
    let spec = config.dtype.spec();
    let g = config.group_size;
    let groups: Vec<QuantizedGroup> = data
        .par_chunks(row_len)
        .flat_map_iter(|row| row.chunks(g))
        .map(|chunk| {
            let mut q = if config.clip_search {
                search_clip_ratio(chunk, scheme, &DEFAULT_CLIP_CANDIDATES)?.1
            } else {
                quantize_group(chunk, scheme, config.alpha)?
            };
            let pad = pad_code(&q.params, spec);
            q.codes.resize(g, pad);
            Ok(q)
        })
        .collect::<Result<_>>()?;
    Ok(QuantizedTensor {
        dims: dims.to_vec(),
        config: *config,
        sv_set: sv_set.copied(),
        groups,
        tail_len,
    })
}

/// Inverse of [`quantize_tensor`]: row-major values with padding dropped.
pub fn dequantize_tensor(qt: &QuantizedTensor) -> Result<Vec<f32>> {
    let (rows, row_len, per_row, tail) = group_layout(&qt.dims, qt.config.group_size)?;
    if qt.groups.len() != rows * per_row {
        return Err(RazerError::Corrupt(format!(
            "expected {} groups, found {}",
            rows * per_row,
            qt.groups.len()
        )));
    }
    let scheme = qt.scheme()?;
    let mut out = Vec::with_capacity(rows * row_len);
    for (i, q) in qt.groups.iter().enumerate() {
        let vals = dequantize_group(q, scheme)?;
        let keep = if i % per_row == per_row - 1 { tail } else { vals.len() };
        out.extend_from_slice(&vals[..keep]);
    }
    Ok(out)
}
