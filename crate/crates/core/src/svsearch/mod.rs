//! Special-value set calibration.
//!
//! Per layer, a derivative-free search picks four special values inside a
//! search range; the values are snapped to the 6-bit storage grid and the
//! per-layer sets are clustered into one model-wide table.

pub mod cmaes;
pub mod kmeans;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{RazerError, Result};
use crate::numerics::{DatatypeSpec, GridKind};
use crate::quantizer::{
    group_layout, quantize_group_fp, quantize_group_int, dequantize_group_int, mse,
    razer_reconstruct, select_special_value, Dtype, KV_GROUP_SIZE, WEIGHT_GROUP_SIZE,
};
use crate::tensor::Matrix;

use cmaes::{CmaesOptions, Vector};

/// Storage step of a special value.
pub const SV_STEP: f32 = 0.5;
/// Default storage width: sign plus five magnitude bits.
pub const SV_BITS: u8 = 6;
/// Largest magnitude on the 6-bit storage grid.
pub const SV_LIMIT: f32 = 15.5;

fn storage_limit(nbits: u8) -> f32 {
    ((1u32 << (nbits - 1)) - 1) as f32 * SV_STEP
}

fn on_storage_grid(v: f32) -> bool {
    v.is_finite() && v.abs() <= SV_LIMIT && (v / SV_STEP).fract() == 0.0
}

/// Four special-value candidates, each off the base grid and on the
/// storage grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct SvSet([f32; 4]);

impl SvSet {
    pub fn new(values: [f32; 4], base: &DatatypeSpec) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            if !on_storage_grid(v) {
                return Err(RazerError::InvalidSvSet(format!(
                    "{v} is not a multiple of {SV_STEP} within ±{SV_LIMIT}"
                )));
            }
            if base.contains(v) {
                return Err(RazerError::InvalidSvSet(format!(
                    "{v} is already a {} grid value",
                    base.name()
                )));
            }
            if values[..i].contains(&v) {
                return Err(RazerError::InvalidSvSet(format!("duplicate value {v}")));
            }
        }
        Ok(SvSet(values))
    }

    /// `{5, 8, -5, -8}`, the default half-precision table of the fast cast.
    pub fn fp4_default() -> Self {
        SvSet([5.0, 8.0, -5.0, -8.0])
    }

    /// The hand-picked `{-10, -5, 5, 10}` baseline.
    pub fn manual() -> Self {
        SvSet([-10.0, -5.0, 5.0, 10.0])
    }

    pub fn values(&self) -> &[f32; 4] {
        &self.0
    }

    /// Values in ascending order.
    pub fn sorted(&self) -> [f32; 4] {
        let mut v = self.0;
        v.sort_by(f32::total_cmp);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SearchRange {
    pub sv_min: f32,
    pub sv_max: f32,
}

impl SearchRange {
    pub fn new(sv_min: f32, sv_max: f32) -> Result<Self> {
        if !(sv_max - sv_min >= SV_STEP) {
            return Err(RazerError::InvalidArgument(format!(
                "search range [{sv_min}, {sv_max}] is narrower than one storage step"
            )));
        }
        Ok(SearchRange { sv_min, sv_max })
    }

    /// `[-9, 9]` for 3-bit grids, `[-12, 12]` otherwise.
    pub fn default_for(spec: &DatatypeSpec) -> Self {
        let m = if spec.bits() == 3 { 9.0 } else { 12.0 };
        SearchRange {
            sv_min: -m,
            sv_max: m,
        }
    }
}

/// One layer's calibration inputs.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    /// Weight matrix, `rows x cols`.
    pub weights: Matrix,
    /// Calibration activations, `cols x samples`.
    pub activations: Option<Matrix>,
    /// KV-cache tensor, `tokens x hidden`.
    pub kv: Option<Matrix>,
}

impl LayerSpec {
    pub fn weights_only(name: impl Into<String>, weights: Matrix) -> Self {
        LayerSpec {
            name: name.into(),
            weights,
            activations: None,
            kv: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(x) = &self.activations {
            if x.rows != self.weights.cols {
                return Err(RazerError::LengthMismatch {
                    expected: self.weights.cols,
                    actual: x.rows,
                });
            }
        }
        Ok(())
    }
}

/// Which operand of a layer a search targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    Weights,
    Kv,
}

fn groups<'a>(data: &'a [f32], dims: &[usize], g: usize) -> Result<impl ParallelIterator<Item = &'a [f32]>> {
    let (_, row_len, _, _) = group_layout(dims, g)?;
    if data.len() != dims.iter().product::<usize>() {
        return Err(RazerError::LengthMismatch {
            expected: dims.iter().product(),
            actual: data.len(),
        });
    }
    Ok(data.par_chunks(row_len).flat_map_iter(move |r| r.chunks(g)))
}

/// Total squared error of plain mini-float quantization.
pub fn fp_baseline_error(data: &[f32], dims: &[usize], spec: &DatatypeSpec, g: usize) -> Result<f64> {
    groups(data, dims, g)?
        .map(|x| {
            let q = quantize_group_fp(x, spec, 1.0)?;
            let d = crate::quantizer::dequantize_group_fp(&q, spec)?;
            mse(x, &d)
        })
        .sum()
}

/// Total squared error of asymmetric integer quantization at `bits`.
pub fn int_baseline_error(data: &[f32], dims: &[usize], bits: u8, g: usize) -> Result<f64> {
    groups(data, dims, g)?
        .map(|x| {
            let q = quantize_group_int(x, bits, 1.0, 1.0)?;
            mse(x, &dequantize_group_int(&q)?)
        })
        .sum()
}

/// Total squared error with per-group selection among `candidates`.
pub fn razer_error(
    data: &[f32],
    dims: &[usize],
    spec: &DatatypeSpec,
    candidates: &[f32],
    g: usize,
) -> Result<f64> {
    Ok(groups(data, dims, g)?
        .map(|x| select_special_value(x, spec, candidates, 1.0).error)
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub magnitude: f32,
    pub razer_err: f64,
}

/// Raw (un-normalized) squared errors of a special-value magnitude sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
    pub fp_baseline: f64,
    pub int_baseline: f64,
}

impl SweepCurve {
    /// Magnitude with the lowest error (first on ties).
    pub fn argmin(&self) -> Option<f32> {
        self.points
            .iter()
            .min_by(|a, b| a.razer_err.total_cmp(&b.razer_err))
            .map(|p| p.magnitude)
    }

    /// True when the minimum lies strictly inside the swept magnitudes.
    pub fn has_interior_minimum(&self) -> bool {
        let n = self.points.len();
        let min = self
            .points
            .iter()
            .map(|p| p.razer_err)
            .fold(f64::INFINITY, f64::min);
        n >= 3
            && self.points[0].razer_err > min
            && self.points[n - 1].razer_err > min
    }

    /// `(magnitude, razer, fp, int)` rows divided by `denominator`; a zero
    /// denominator yields zeros.
    pub fn normalized(&self, denominator: f64) -> Vec<(f32, f64, f64, f64)> {
        let norm = |v: f64| if denominator > 0.0 { v / denominator } else { 0.0 };
        self.points
            .iter()
            .map(|p| {
                (
                    p.magnitude,
                    norm(p.razer_err),
                    norm(self.fp_baseline),
                    norm(self.int_baseline),
                )
            })
            .collect()
    }
}

/// Error of RaZeR quantization with the candidate pair `{+m, -m}` for each
/// magnitude `m`, against plain mini-float and asymmetric integer baselines
/// of the same width.
pub fn sweep_sv_error(
    data: &[f32],
    dims: &[usize],
    spec: &DatatypeSpec,
    magnitudes: &[f32],
    g: usize,
) -> Result<SweepCurve> {
    if let Some(&m) = magnitudes.iter().find(|&&m| !(m > 0.0)) {
        return Err(RazerError::InvalidArgument(format!("magnitude {m}")));
    }
    let fp_baseline = fp_baseline_error(data, dims, spec, g)?;
    let int_baseline = int_baseline_error(data, dims, spec.bits(), g)?;
    let points = magnitudes
        .iter()
        .map(|&m| {
            Ok(SweepPoint {
                magnitude: m,
                razer_err: razer_error(data, dims, spec, &[m, -m], g)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepCurve {
        points,
        fp_baseline,
        int_baseline,
    })
}

/// Search range from one-sided sweeps over integer magnitudes `1..=15`: each
/// bound is the largest magnitude on that side whose error beats the plain
/// mini-float baseline. Sides with no winner keep the default bound.
pub fn derive_search_range(
    data: &[f32],
    dims: &[usize],
    spec: &DatatypeSpec,
    g: usize,
) -> Result<SearchRange> {
    let default = SearchRange::default_for(spec);
    let baseline = fp_baseline_error(data, dims, spec, g)?;
    let mut pos = None;
    let mut neg = None;
    for m in 1..=15 {
        let m = m as f32;
        if razer_error(data, dims, spec, &[m], g)? < baseline {
            pos = Some(m);
        }
        if razer_error(data, dims, spec, &[-m], g)? < baseline {
            neg = Some(m);
        }
    }
    let sv_max = pos.unwrap_or(default.sv_max).min(SV_LIMIT);
    let sv_min = neg.map_or(default.sv_min, |m| -m).max(-SV_LIMIT);
    SearchRange::new(sv_min, sv_max)
}

/// Calibration objective for `candidates`: `||(W - Ŵ) X||_F^2` when
/// activations are given, `||W - Ŵ||_F^2` otherwise.
pub fn layer_objective(
    weights: &Matrix,
    activations: Option<&Matrix>,
    spec: &DatatypeSpec,
    candidates: &[f32],
    g: usize,
) -> f64 {
    let rows: Vec<f64> = (0..weights.rows)
        .into_par_iter()
        .map(|r| {
            let w = weights.row(r);
            let mut recon = vec![0f32; w.len()];
            let mut err = 0.0;
            for (x, out) in w.chunks(g).zip(recon.chunks_mut(g)) {
                err += razer_reconstruct(x, spec, candidates, 1.0, out);
            }
            match activations {
                None => err,
                Some(act) => {
                    let mut y = vec![0f64; act.cols];
                    for (k, (&a, &b)) in w.iter().zip(&recon).enumerate() {
                        let e = a as f64 - b as f64;
                        if e != 0.0 {
                            for (yj, &xj) in y.iter_mut().zip(act.row(k)) {
                                *yj += e * xj as f64;
                            }
                        }
                    }
                    y.iter().map(|v| v * v).sum()
                }
            }
        })
        .collect();
    rows.iter().sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchOptions {
    /// Objective evaluations allowed.
    pub budget: usize,
    pub seed: u64,
    pub group_size: usize,
    /// Storage width the candidates are snapped to during the search.
    pub nbits: u8,
}

impl SearchOptions {
    pub fn new(budget: usize, seed: u64, group_size: usize) -> Self {
        SearchOptions {
            budget,
            seed,
            group_size,
            nbits: SV_BITS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub set: SvSet,
    pub objective: f64,
    /// Best objective within the first generation.
    pub initial_best: f64,
    pub evaluations: usize,
}

/// Evolution-strategy search for one layer's special-value set. Candidates
/// are snapped to the storage grid before every evaluation, so the returned
/// set is exactly the best evaluated one.
pub fn search_layer_svset(
    layer: &LayerSpec,
    operand: Operand,
    spec: &DatatypeSpec,
    range: SearchRange,
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    layer.validate()?;
    if spec.kind() != GridKind::Float {
        return Err(RazerError::InvalidArgument(format!(
            "{} has no special-value slot",
            spec.name()
        )));
    }
    if opts.budget < 20 {
        return Err(RazerError::InvalidArgument(format!(
            "budget must be at least 20, got {}",
            opts.budget
        )));
    }
    let range = SearchRange::new(range.sv_min, range.sv_max)?;
    let (target, acts) = match operand {
        Operand::Weights => (&layer.weights, layer.activations.as_ref()),
        Operand::Kv => (
            layer
                .kv
                .as_ref()
                .ok_or(RazerError::Empty("layer has no KV tensor"))?,
            None,
        ),
    };
    if target.data.is_empty() {
        return Err(RazerError::Empty("layer operand"));
    }

    let mut cache: HashMap<[i32; 4], f64> = HashMap::new();
    let mut eval = |raw: &[f32; 4]| -> Result<(SvSet, f64)> {
        let set = snap_values(*raw, spec, opts.nbits)?;
        let key = set.sorted().map(|v| (v / SV_STEP) as i32);
        let obj = *cache
            .entry(key)
            .or_insert_with(|| layer_objective(target, acts, spec, set.values(), opts.group_size));
        Ok((set, obj))
    };

    let (lo, hi) = (range.sv_min as f64, range.sv_max as f64);
    let mean0 = Vector::<4>::from_fn(|i, _| lo + (hi - lo) * (i + 1) as f64 / 5.0);
    let cm_opts = CmaesOptions {
        population: 16,
        sigma0: (hi - lo) / 4.0,
        budget: opts.budget,
        seed: opts.seed,
    };
    let mut failure = None;
    let result = cmaes::minimize(
        |x| {
            let raw = [x[0] as f32, x[1] as f32, x[2] as f32, x[3] as f32];
            match eval(&raw) {
                Ok((_, v)) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::INFINITY
                }
            }
        },
        mean0,
        lo,
        hi,
        &cm_opts,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let best = [
        result.best[0] as f32,
        result.best[1] as f32,
        result.best[2] as f32,
        result.best[3] as f32,
    ];
    let (set, objective) = eval(&best)?;
    debug_assert_eq!(objective, result.best_value);
    Ok(SearchOutcome {
        set,
        objective,
        initial_best: result.initial_best_value,
        evaluations: result.evaluations,
    })
}

fn snap(v: f32, nbits: u8) -> f32 {
    let limit = storage_limit(nbits);
    ((v / SV_STEP).round() * SV_STEP).clamp(-limit, limit)
}

/// Snap four values onto the storage grid and resolve collisions with the
/// base grid or with each other by stepping outward one storage step at a
/// time (inward once the storage limit is reached).
pub fn snap_values(raw: [f32; 4], base: &DatatypeSpec, nbits: u8) -> Result<SvSet> {
    if !(3..=SV_BITS).contains(&nbits) {
        return Err(RazerError::InvalidArgument(format!(
            "special values use 3..={SV_BITS} storage bits, got {nbits}"
        )));
    }
    let limit = storage_limit(nbits);
    let mut out = [0f32; 4];
    for i in 0..4 {
        let start = snap(raw[i], nbits);
        let taken = |v: f32| base.contains(v) || out[..i].contains(&v);
        let dir = if start < 0.0 { -SV_STEP } else { SV_STEP };
        let outward = (0..).map(|k| start + dir * k as f32).take_while(|v| v.abs() <= limit);
        let inward = (1..).map(|k| start - dir * k as f32).take_while(|v| v.abs() <= limit);
        out[i] = outward
            .chain(inward)
            .find(|&v| !taken(v))
            .ok_or_else(|| RazerError::InvalidSvSet(format!("no free storage value near {start}")))?;
    }
    SvSet::new(out, base)
}

/// Round each raw set to `nbits` storage bits.
pub fn round_svset(sets: &[[f32; 4]], base: &DatatypeSpec, nbits: u8) -> Result<Vec<SvSet>> {
    sets.iter().map(|&s| snap_values(s, base, nbits)).collect()
}

/// Merge per-layer sets into one 4-entry table: k-means (k = 4) over the
/// union of all values, centroids rounded back to the storage grid.
pub fn cluster_svsets(sets: &[SvSet], base: &DatatypeSpec, seed: u64) -> Result<SvSet> {
    if sets.is_empty() {
        return Err(RazerError::Empty("special-value sets"));
    }
    let points: Vec<f64> = sets
        .iter()
        .flat_map(|s| s.values().iter().map(|&v| v as f64))
        .collect();
    let km = kmeans::kmeans_1d(&points, 4, seed, 100).ok_or_else(|| {
        RazerError::InvalidSvSet("fewer than 4 distinct special values to cluster".into())
    })?;
    let c = &km.centroids;
    snap_values([c[0] as f32, c[1] as f32, c[2] as f32, c[3] as f32], base, SV_BITS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub weight_dtype: Dtype,
    pub kv_dtype: Dtype,
    pub budget: usize,
    pub seed: u64,
    pub weight_group_size: usize,
    pub kv_group_size: usize,
    /// `None` uses [`SearchRange::default_for`].
    pub weight_range: Option<SearchRange>,
    pub kv_range: Option<SearchRange>,
    pub nbits: u8,
}

impl CalibrationConfig {
    pub fn new(weight_dtype: Dtype, kv_dtype: Dtype, budget: usize, seed: u64) -> Self {
        CalibrationConfig {
            weight_dtype,
            kv_dtype,
            budget,
            seed,
            weight_group_size: WEIGHT_GROUP_SIZE,
            kv_group_size: KV_GROUP_SIZE,
            weight_range: None,
            kv_range: None,
            nbits: SV_BITS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCalibration {
    pub name: String,
    pub weight_set: SvSet,
    pub weight_objective: f64,
    pub kv_set: Option<SvSet>,
    pub kv_objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub seed: u64,
    pub budget: usize,
    pub nbits: u8,
    pub weight_dtype: Dtype,
    pub kv_dtype: Dtype,
    pub weight_range: SearchRange,
    pub kv_range: SearchRange,
    pub layers: Vec<LayerCalibration>,
    pub model_weight_set: SvSet,
    pub model_kv_set: Option<SvSet>,
    /// Summed weight objective of all layers under the model set.
    pub model_weight_objective: f64,
    pub model_kv_objective: Option<f64>,
    /// Same sums under the hand-picked `{-10, -5, 5, 10}` set.
    pub manual_weight_objective: f64,
    pub manual_kv_objective: Option<f64>,
}

fn derive_seed(seed: u64, layer: usize, operand: Operand) -> u64 {
    let tag = (layer as u64) << 1 | (operand == Operand::Kv) as u64;
    seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn model_objective(layers: &[LayerSpec], operand: Operand, spec: &DatatypeSpec, set: &SvSet, g: usize) -> f64 {
    layers
        .iter()
        .map(|l| match operand {
            Operand::Weights => layer_objective(&l.weights, l.activations.as_ref(), spec, set.values(), g),
            Operand::Kv => l
                .kv
                .as_ref()
                .map_or(0.0, |kv| layer_objective(kv, None, spec, set.values(), g)),
        })
        .sum()
}

/// End-to-end special-value calibration: per-layer search for weights and
/// (when present) KV tensors, rounding to storage bits, then clustering into
/// model-wide sets.
pub fn calibrate_model(layers: &[LayerSpec], config: &CalibrationConfig) -> Result<CalibrationReport> {
    if layers.is_empty() {
        return Err(RazerError::Empty("layers"));
    }
    for dtype in [config.weight_dtype, config.kv_dtype] {
        if !dtype.is_razer() {
            return Err(RazerError::InvalidArgument(format!(
                "{} has no special-value slot",
                dtype.name()
            )));
        }
    }
    let w_spec = config.weight_dtype.spec();
    let kv_spec = config.kv_dtype.spec();
    let w_range = config.weight_range.unwrap_or_else(|| SearchRange::default_for(w_spec));
    let kv_range = config.kv_range.unwrap_or_else(|| SearchRange::default_for(kv_spec));
    let has_kv = layers.iter().any(|l| l.kv.is_some());

    let searched: Vec<(SearchOutcome, Option<SearchOutcome>)> = layers
        .par_iter()
        .enumerate()
        .map(|(i, layer)| {
            let mut w_opts = SearchOptions::new(config.budget, derive_seed(config.seed, i, Operand::Weights), config.weight_group_size);
            w_opts.nbits = config.nbits;
            let w = search_layer_svset(layer, Operand::Weights, w_spec, w_range, &w_opts)?;
            let kv = match layer.kv {
                Some(_) => {
                    let mut kv_opts = SearchOptions::new(config.budget, derive_seed(config.seed, i, Operand::Kv), config.kv_group_size);
                    kv_opts.nbits = config.nbits;
                    Some(search_layer_svset(layer, Operand::Kv, kv_spec, kv_range, &kv_opts)?)
                }
                None => None,
            };
            Ok((w, kv))
        })
        .collect::<Result<_>>()?;

    let w_rounded = round_svset(
        &searched.iter().map(|(w, _)| *w.set.values()).collect::<Vec<_>>(),
        w_spec,
        config.nbits,
    )?;
    let kv_raw: Vec<[f32; 4]> = searched
        .iter()
        .filter_map(|(_, kv)| kv.as_ref().map(|o| *o.set.values()))
        .collect();
    let kv_rounded = round_svset(&kv_raw, kv_spec, config.nbits)?;

    let model_weight_set = cluster_svsets(&w_rounded, w_spec, config.seed)?;
    let model_kv_set = if has_kv {
        Some(cluster_svsets(&kv_rounded, kv_spec, config.seed)?)
    } else {
        None
    };

    let mut kv_iter = kv_rounded.iter();
    let layer_reports = layers
        .iter()
        .zip(&searched)
        .zip(&w_rounded)
        .map(|((layer, (_, kv)), w_set)| LayerCalibration {
            name: layer.name.clone(),
            weight_set: *w_set,
            weight_objective: layer_objective(
                &layer.weights,
                layer.activations.as_ref(),
                w_spec,
                w_set.values(),
                config.weight_group_size,
            ),
            kv_set: kv.as_ref().and_then(|_| kv_iter.next().copied()),
            kv_objective: kv.as_ref().map(|o| o.objective),
        })
        .collect::<Vec<_>>();
    // Rounding may move a set when nbits < 6; report the rounded set's objective.
    let layer_reports: Vec<LayerCalibration> = layer_reports
        .into_iter()
        .zip(layers)
        .map(|(mut r, l)| {
            if let (Some(set), Some(kv)) = (r.kv_set, l.kv.as_ref()) {
                r.kv_objective = Some(layer_objective(kv, None, kv_spec, set.values(), config.kv_group_size));
            }
            r
        })
        .collect();

    let manual = SvSet::manual();
    Ok(CalibrationReport {
        seed: config.seed,
        budget: config.budget,
        nbits: config.nbits,
        weight_dtype: config.weight_dtype,
        kv_dtype: config.kv_dtype,
        weight_range: w_range,
        kv_range,
        layers: layer_reports,
        model_weight_set,
        model_kv_set,
        model_weight_objective: model_objective(layers, Operand::Weights, w_spec, &model_weight_set, config.weight_group_size),
        model_kv_objective: model_kv_set
            .map(|s| model_objective(layers, Operand::Kv, kv_spec, &s, config.kv_group_size)),
        manual_weight_objective: model_objective(layers, Operand::Weights, w_spec, &manual, config.weight_group_size),
        manual_kv_objective: has_kv
            .then(|| model_objective(layers, Operand::Kv, kv_spec, &manual, config.kv_group_size)),
    })
}
