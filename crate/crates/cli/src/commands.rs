use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use razer_core::codec::{container, effective_bits, ntfile, NtDtype, NtTensor};
use razer_core::kernels::{self, bench::parse_shape, KvFormat, KvSimConfig};
use razer_core::quantizer::{dequantize_tensor, mse, quantize_tensor, Dtype, QuantConfig};
use razer_core::svsearch::{calibrate_model, sweep_sv_error, CalibrationConfig, LayerSpec, SvSet};
use razer_core::{synth as gen, DatatypeSpec, Matrix};

use crate::{usage, BenchArgs, CalibrateArgs, DequantizeArgs, KvSimArgs, QuantizeArgs, SweepArgs, SynthArgs};

/// Per-group scale bits assumed by the effective-bits figure.
const SUMMARY_SCALE_BITS: u32 = 8;

fn parse_dtype(s: &str) -> Result<Dtype> {
    s.parse().map_err(|_| usage(format!("unknown dtype {s:?} (int4, int3, fp4rzr, fp3rzr)")))
}

fn check_group_size(dtype: Dtype, g: usize) -> Result<()> {
    if g < 2 {
        return Err(usage(format!("group size must be at least 2, got {g}")));
    }
    if dtype == Dtype::Fp3Razer && g != 128 {
        return Err(usage("fp3rzr containers use a group size of 128"));
    }
    Ok(())
}

fn parse_sv_list(s: &str, spec: &DatatypeSpec) -> Result<SvSet> {
    let vals: Vec<f32> = s
        .split(',')
        .map(|t| t.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("special values must be four numbers, got {s:?}")))?;
    let arr: [f32; 4] = vals
        .try_into()
        .map_err(|_| usage(format!("expected exactly four special values, got {s:?}")))?;
    SvSet::new(arr, spec).map_err(|e| usage(e.to_string()))
}

fn read_tensor(path: &Path) -> Result<NtTensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ntfile::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_tensor(path: &Path, t: &NtTensor, dtype: NtDtype) -> Result<()> {
    let bytes = ntfile::to_bytes(t, dtype)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn as_matrix(t: &NtTensor, what: &str) -> Result<Matrix> {
    let cols = *t.dims.last().context("tensor has no dimensions")?;
    if cols == 0 || t.data.is_empty() {
        bail!("{what}: empty tensor");
    }
    Ok(Matrix::new(t.data.len() / cols, cols, t.data.clone())?)
}

fn csv_sink(path: &Option<PathBuf>) -> Result<csv::Writer<Box<dyn Write>>> {
    let w: Box<dyn Write> = match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(w))
}

#[derive(Serialize)]
struct QuantizeSummary {
    input: String,
    output: String,
    dtype: Dtype,
    dims: Vec<usize>,
    group_size: usize,
    groups: usize,
    tail_len: usize,
    padded: bool,
    sv_set: Option<SvSet>,
    clip: String,
    seed: u64,
    /// Summed squared error over all elements.
    mse: f64,
    mean_sq_error: f64,
    max_abs_error: f64,
    effective_bits: f64,
    container_bytes: usize,
    container_bits_per_element: f64,
}

pub fn quantize(a: &QuantizeArgs) -> Result<()> {
    let dtype = parse_dtype(&a.dtype)?;
    check_group_size(dtype, a.group_size)?;
    let mut config = QuantConfig::new(dtype, a.group_size);
    if a.clip == "search" {
        config.clip_search = true;
    } else {
        let alpha: f32 = a
            .clip
            .parse()
            .ok()
            .filter(|v: &f32| *v > 0.0 && *v <= 1.0)
            .ok_or_else(|| usage(format!("--clip must be in (0, 1] or 'search', got {:?}", a.clip)))?;
        config.alpha = alpha;
        config.beta = alpha;
    }
    let spec = dtype.spec();
    let sv_arg = match (dtype.is_razer(), a.sv.as_deref()) {
        (true, None) => return Err(usage(format!("{} requires --sv auto or four values", dtype.name()))),
        (false, Some(_)) => return Err(usage("--sv applies only to RaZeR dtypes")),
        (_, s) => s,
    };
    if sv_arg == Some("auto") && a.budget < 20 {
        return Err(usage("--budget must be at least 20"));
    }
    let sv_list = match sv_arg {
        Some(s) if s != "auto" => Some(parse_sv_list(s, spec)?),
        _ => None,
    };

    let t = read_tensor(&a.input)?;
    let sv_set = match (sv_arg, sv_list) {
        (Some("auto"), _) => {
            let layer = LayerSpec::weights_only("input", as_matrix(&t, "input")?);
            let mut cfg = CalibrationConfig::new(dtype, dtype, a.budget, a.seed);
            cfg.weight_group_size = a.group_size;
            Some(calibrate_model(&[layer], &cfg)?.model_weight_set)
        }
        (_, list) => list,
    };
    let row_len = *t.dims.last().context("tensor has no dimensions")?;
    if row_len % a.group_size != 0 {
        eprintln!(
            "warning: row length {row_len} is not a multiple of {}; last group of each row is padded",
            a.group_size
        );
    }
    let qt = quantize_tensor(&t.data, &t.dims, &config, sv_set.as_ref())?;
    let bytes = container::to_bytes(&qt)?;
    fs::write(&a.output, &bytes).with_context(|| format!("writing {}", a.output.display()))?;

    let recon = dequantize_tensor(&qt)?;
    let total = mse(&t.data, &recon)?;
    let max_abs = t
        .data
        .iter()
        .zip(&recon)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max);
    let meta_bits = if dtype.is_razer() { 2 } else { dtype.bits() as u32 };
    let summary = QuantizeSummary {
        input: a.input.display().to_string(),
        output: a.output.display().to_string(),
        dtype,
        dims: t.dims.clone(),
        group_size: a.group_size,
        groups: qt.groups.len(),
        tail_len: qt.tail_len,
        padded: row_len % a.group_size != 0,
        sv_set,
        clip: a.clip.clone(),
        seed: a.seed,
        mse: total,
        mean_sq_error: total / t.data.len() as f64,
        max_abs_error: max_abs,
        effective_bits: effective_bits(dtype.bits() as u32, a.group_size as u32, SUMMARY_SCALE_BITS, meta_bits)?,
        container_bytes: bytes.len(),
        container_bits_per_element: bytes.len() as f64 * 8.0 / t.data.len() as f64,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

pub fn dequantize(a: &DequantizeArgs) -> Result<()> {
    let format = match a.format.as_str() {
        "f32" => NtDtype::F32,
        "f16" => NtDtype::F16,
        f => return Err(usage(format!("--format must be f32 or f16, got {f:?}"))),
    };
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let qt = container::from_bytes(&bytes).with_context(|| format!("parsing {}", a.input.display()))?;
    let data = dequantize_tensor(&qt)?;
    write_tensor(&a.output, &NtTensor::new(qt.dims.clone(), data)?, format)
}

#[derive(Serialize)]
struct SweepRow {
    sv_magnitude: f32,
    razer_err: f64,
    fp_baseline_err: f64,
    int_baseline_err: f64,
}

fn parse_range(s: &str) -> Result<(f32, f32)> {
    let bad = || usage(format!("--range must be a:b with 0 < a < b, got {s:?}"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f32 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f32 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo > 0.0 && lo < hi && hi.is_finite()) {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn sweep_sv(a: &SweepArgs) -> Result<()> {
    let dtype = parse_dtype(&a.dtype)?;
    if !dtype.is_razer() {
        return Err(usage("sweep-sv needs fp4rzr or fp3rzr"));
    }
    if a.group_size < 2 {
        return Err(usage("group size must be at least 2"));
    }
    let (lo, hi) = parse_range(&a.range)?;
    if !(a.step > 0.0) {
        return Err(usage("--step must be positive"));
    }
    let count = ((hi - lo) / a.step + 1e-4).floor() as usize + 1;
    let mags: Vec<f32> = (0..count).map(|i| lo + i as f32 * a.step).collect();
    let t = read_tensor(&a.input)?;
    let curve = sweep_sv_error(&t.data, &t.dims, dtype.spec(), &mags, a.group_size)?;
    let mut w = csv_sink(&a.csv)?;
    for (m, r, f, i) in curve.normalized(curve.int_baseline) {
        w.serialize(SweepRow {
            sv_magnitude: m,
            razer_err: r,
            fp_baseline_err: f,
            int_baseline_err: i,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn load_layers(dir: &Path) -> Result<Vec<LayerSpec>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".nt") && !n.ends_with(".x.nt") && !n.ends_with(".kv.nt"))
        .map(|n| n.trim_end_matches(".nt").to_string())
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no layer files (*.nt) in {}", dir.display());
    }
    names
        .into_iter()
        .map(|name| {
            let weights = as_matrix(&read_tensor(&dir.join(format!("{name}.nt")))?, &name)?;
            let optional = |suffix: &str| -> Result<Option<Matrix>> {
                let p = dir.join(format!("{name}.{suffix}.nt"));
                if p.exists() {
                    Ok(Some(as_matrix(&read_tensor(&p)?, &name)?))
                } else {
                    Ok(None)
                }
            };
            let layer = LayerSpec {
                activations: optional("x")?,
                kv: optional("kv")?,
                name,
                weights,
            };
            layer.validate()?;
            Ok(layer)
        })
        .collect()
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let dtype = parse_dtype(&a.dtype)?;
    let kv_dtype = match &a.kv_dtype {
        Some(s) => parse_dtype(s)?,
        None => dtype,
    };
    if !dtype.is_razer() || !kv_dtype.is_razer() {
        return Err(usage("calibration needs fp4rzr or fp3rzr"));
    }
    if a.budget < 20 {
        return Err(usage("--budget must be at least 20"));
    }
    if a.group_size < 2 || a.kv_group_size < 2 {
        return Err(usage("group sizes must be at least 2"));
    }
    let layers = load_layers(&a.layers)?;
    let mut cfg = CalibrationConfig::new(dtype, kv_dtype, a.budget, a.seed);
    cfg.weight_group_size = a.group_size;
    cfg.kv_group_size = a.kv_group_size;
    let report = calibrate_model(&layers, &cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&a.out, json + "\n").with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "{} layers: model set {:?}, objective {:.6e} (manual {:.6e})",
        report.layers.len(),
        report.model_weight_set.values(),
        report.model_weight_objective,
        report.manual_weight_objective
    );
    Ok(())
}

pub fn kv_sim(a: &KvSimArgs) -> Result<()> {
    let format: KvFormat = a
        .dtype
        .parse()
        .map_err(|_| usage(format!("unknown dtype {:?} (fp16, int4, int3, fp4rzr, fp3rzr)", a.dtype)))?;
    let razer = matches!(format, KvFormat::Quantized(d) if d.is_razer());
    let sv_set = match (razer, &a.sv, format) {
        (true, Some(s), KvFormat::Quantized(d)) => Some(parse_sv_list(s, d.spec())?),
        (true, None, _) => Some(SvSet::fp4_default()),
        (false, Some(_), _) => return Err(usage("--sv applies only to RaZeR dtypes")),
        _ => None,
    };
    if a.tokens == 0 || a.dim == 0 || a.buffer == 0 || a.group_size < 2 {
        return Err(usage("tokens, dim and buffer must be positive; group size at least 2"));
    }
    let cfg = KvSimConfig {
        tokens: a.tokens,
        dim: a.dim,
        buffer: a.buffer,
        group_size: a.group_size,
        format,
        seed: a.seed,
    };
    let steps = kernels::simulate_kv(&cfg, sv_set)?;
    let mut w = csv_sink(&a.csv)?;
    for s in &steps {
        w.serialize(s)?;
    }
    w.flush()?;
    let mean = steps.iter().map(|s| s.attn_error).sum::<f64>() / steps.len() as f64;
    eprintln!(
        "{} tokens, {} flushes, mean attention error {mean:.6e}",
        a.tokens,
        steps.last().map_or(0, |s| s.flush_events)
    );
    Ok(())
}

pub fn bench_gemv(a: &BenchArgs) -> Result<()> {
    let shapes = a
        .shapes
        .split(',')
        .map(|s| parse_shape(s).map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if a.reps < 3 {
        return Err(usage("--reps must be at least 3"));
    }
    let rows = kernels::bench_gemv(&shapes, a.reps, a.seed, a.self_check)?;
    if a.self_check {
        eprintln!("self-check passed: fused output equals reference for every shape");
    }
    let mut w = csv_sink(&a.csv)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.rows == 0 || a.cols == 0 {
        return Err(usage("rows and cols must be positive"));
    }
    let m = match a.kind.as_str() {
        "normal" => gen::normal_matrix(a.rows, a.cols, a.seed),
        "outlier" => {
            if a.group_size < 2 {
                return Err(usage("group size must be at least 2"));
            }
            gen::planted_outlier_layer(a.rows, a.cols, a.group_size, a.direction, a.seed)
        }
        k => return Err(usage(format!("--kind must be normal or outlier, got {k:?}"))),
    };
    write_tensor(&a.output, &NtTensor::new(vec![a.rows, a.cols], m.data)?, NtDtype::F32)
}
