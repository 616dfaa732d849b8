use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use razer_core::codec::{ntfile, NtDtype, NtTensor};
use razer_core::numerics::{fp3_grid, fp4_grid};
use razer_core::quantizer::{dequantize_tensor, quantize_tensor, Dtype, QuantConfig};
use razer_core::synth::normal_matrix;
use razer_core::SvSet;
use serde_json::Value;
use tempfile::TempDir;

fn razer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_razer"))
        .args(args)
        .env("RAZER_THREADS", "2")
        .output()
        .expect("spawn razer")
}

fn ok(args: &[&str]) -> String {
    let out = razer(args);
    assert!(
        out.status.success(),
        "razer {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    razer(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &TempDir, name: &str, dims: &[usize], data: Vec<f32>) -> PathBuf {
    let p = dir.path().join(name);
    let t = NtTensor::new(dims.to_vec(), data).unwrap();
    std::fs::write(&p, ntfile::to_bytes(&t, NtDtype::F32).unwrap()).unwrap();
    p
}

fn read(p: &Path) -> NtTensor {
    ntfile::from_bytes(&std::fs::read(p).unwrap()).unwrap()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas").join(name);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&v).unwrap()
}

fn assert_valid(validator: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}\n{doc:#}");
}

/// CSV rows as JSON objects, with numbers and booleans typed.
fn csv_rows(text: &str) -> Vec<Value> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            let obj = headers
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| {
                    let val = if let Ok(i) = v.parse::<u64>() {
                        Value::from(i)
                    } else if let Ok(f) = v.parse::<f64>() {
                        Value::from(f)
                    } else if let Ok(b) = v.parse::<bool>() {
                        Value::from(b)
                    } else {
                        Value::from(v)
                    };
                    (h.to_string(), val)
                })
                .collect();
            Value::Object(obj)
        })
        .collect()
}

/// Groups of 128 drawn from the grid times `scale`, each holding both extremes.
fn grid_exact(grid: &[f32], rows: usize, cols: usize, scale: f32) -> Vec<f32> {
    let top = grid.iter().cloned().fold(0.0f32, f32::max);
    (0..rows * cols)
        .map(|i| match i % 128 {
            0 => top * scale,
            1 => -top * scale,
            j => grid[(j * 7 + i / 128) % grid.len()] * scale,
        })
        .collect()
}

#[test]
fn usage_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "w.nt", &[2, 128], vec![0.5; 256]);
    let out = dir.path().join("w.rzr");
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["quantize", "--input", s(&input)]), 1);
    let base = ["quantize", "--input", s(&input), "--output", s(&out)];
    fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
        [base, extra].concat()
    }
    assert_eq!(code(&with(&base, &["--dtype", "fp4rzr"])), 1);
    assert_eq!(code(&with(&base, &["--dtype", "int5"])), 1);
    assert_eq!(code(&with(&base, &["--dtype", "int4", "--sv", "5,8,-5,-8"])), 1);
    assert_eq!(code(&with(&base, &["--dtype", "fp4rzr", "--sv", "5,8,-5"])), 1);
    assert_eq!(code(&with(&base, &["--dtype", "fp4rzr", "--sv", "4,8,-5,-8"])), 1);
    assert_eq!(code(&with(&base, &["--dtype", "fp4rzr", "--sv", "5,5,-5,-8"])), 1);
    assert_eq!(code(&with(&base, &["--dtype", "int4", "--clip", "1.5"])), 1);
    assert_eq!(code(&with(&base, &["--dtype", "fp3rzr", "--sv", "3,5,-3,-5", "--group-size", "64"])), 1);
    assert_eq!(code(&["sweep-sv", "--input", s(&input), "--range", "9:3"]), 1);
    assert_eq!(code(&["sweep-sv", "--input", s(&input), "--step", "0"]), 1);
    assert_eq!(code(&["bench-gemv", "--shapes", "8by8"]), 1);
    assert_eq!(code(&["bench-gemv", "--shapes", "8x128", "--reps", "2"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.nt");
    let out = dir.path().join("o.rzr");
    assert_eq!(
        code(&["quantize", "--input", s(&missing), "--dtype", "int4", "--output", s(&out)]),
        2
    );
    let junk = dir.path().join("junk.rzr");
    std::fs::write(&junk, b"JUNKJUNKJUNKJUNKJUNK").unwrap();
    let o = razer(&["dequantize", "--input", s(&junk), "--output", s(&dir.path().join("x.nt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));

    // A valid container cut short.
    let input = write(&dir, "w.nt", &[2, 128], normal_matrix(2, 128, 1).data);
    ok(&["quantize", "--input", s(&input), "--dtype", "int4", "--output", s(&out)]);
    let bytes = std::fs::read(&out).unwrap();
    std::fs::write(&junk, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(code(&["dequantize", "--input", s(&junk), "--output", s(&dir.path().join("x.nt"))]), 2);

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["calibrate", "--layers", s(&empty), "--out", s(&dir.path().join("r.json"))]), 2);
}

#[test]
fn grid_exact_input_has_zero_error_and_expected_bits() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "g.nt", &[4, 256], grid_exact(fp4_grid().grid(), 4, 256, 0.25));
    let out = dir.path().join("g.rzr");
    let text = ok(&[
        "quantize", "--input", s(&input), "--dtype", "fp4rzr", "--sv", "5,8,-5,-8", "--output", s(&out),
    ]);
    let summary: Value = serde_json::from_str(&text).unwrap();
    assert_valid(&schema("quantize_summary.schema.json"), &summary);
    assert_eq!(summary["mse"], 0.0);
    assert_eq!(summary["effective_bits"], 4.078125);
    assert_eq!(summary["groups"], 8);
    assert_eq!(summary["container_bytes"], std::fs::metadata(&out).unwrap().len());

    let dq = dir.path().join("g2.nt");
    ok(&["dequantize", "--input", s(&out), "--output", s(&dq)]);
    assert_eq!(read(&dq).data, read(&input).data);
}

#[test]
fn effective_bits_per_dtype() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "w.nt", &[1, 128], normal_matrix(1, 128, 3).data);
    let out = dir.path().join("w.rzr");
    for (dtype, sv, bits) in [
        ("int4", None, 4.09375),
        ("int3", None, 3.0859375),
        ("fp4rzr", Some("5,8,-5,-8"), 4.078125),
        ("fp3rzr", Some("3,5,-3,-5"), 3.078125),
    ] {
        let mut args = vec!["quantize", "--input", s(&input), "--dtype", dtype, "--output", s(&out)];
        if let Some(sv) = sv {
            args.extend(["--sv", sv]);
        }
        let summary: Value = serde_json::from_str(&ok(&args)).unwrap();
        assert_eq!(summary["effective_bits"], bits, "{dtype}");
    }
}

#[test]
fn summary_error_matches_library() {
    let dir = TempDir::new().unwrap();
    let m = normal_matrix(6, 300, 9);
    let input = write(&dir, "w.nt", &[6, 300], m.data.clone());
    let out = dir.path().join("w.rzr");
    let o = razer(&[
        "quantize", "--input", s(&input), "--dtype", "fp4rzr", "--sv", "5,8,-5,-8", "--output", s(&out),
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["padded"], true);
    assert_eq!(summary["tail_len"], 300 % 128);

    let set = SvSet::new([5.0, 8.0, -5.0, -8.0], fp4_grid()).unwrap();
    let qt = quantize_tensor(&m.data, &[6, 300], &QuantConfig::new(Dtype::Fp4Razer, 128), Some(&set)).unwrap();
    let recon = dequantize_tensor(&qt).unwrap();
    let oracle: f64 = m.data.iter().zip(&recon).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    assert_eq!(summary["mse"].as_f64().unwrap(), oracle);

    let dq = dir.path().join("d.nt");
    ok(&["dequantize", "--input", s(&out), "--output", s(&dq)]);
    assert_eq!(read(&dq).data, recon);
}

#[test]
fn runs_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "w.nt", &[8, 256], normal_matrix(8, 256, 4).data);
    let (a, b) = (dir.path().join("a.rzr"), dir.path().join("b.rzr"));
    let run = |out: &Path| {
        ok(&[
            "quantize", "--input", s(&input), "--dtype", "fp4rzr", "--sv", "auto", "--budget", "40", "--seed", "7",
            "--output", s(out),
        ])
    };
    let (sa, sb) = (run(&a), run(&b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let strip = |t: &str| {
        let mut v: Value = serde_json::from_str(t).unwrap();
        v.as_object_mut().unwrap().remove("output");
        v
    };
    assert_eq!(strip(&sa), strip(&sb));

    let kv = |seed: &str| ok(&["kv-sim", "--tokens", "70", "--dim", "64", "--seed", seed]);
    assert_eq!(kv("3"), kv("3"));
    assert_ne!(kv("3"), kv("4"));
}

#[test]
fn requantizing_dequantized_output_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "w.nt", &[16, 256], normal_matrix(16, 256, 5).data);
    for (dtype, sv) in [
        ("int4", None),
        ("int3", None),
        ("fp4rzr", Some("5,8,-5,-8")),
        ("fp3rzr", Some("3,5,-3,-5")),
    ] {
        let (a, b) = (dir.path().join("a.rzr"), dir.path().join("b.rzr"));
        let dq = dir.path().join("d.nt");
        let q = |src: &Path, dst: &Path| {
            let mut args = vec!["quantize", "--input", s(src), "--dtype", dtype, "--output", s(dst)];
            if let Some(sv) = sv {
                args.extend(["--sv", sv]);
            }
            ok(&args);
        };
        q(&input, &a);
        ok(&["dequantize", "--input", s(&a), "--output", s(&dq)]);
        q(&dq, &b);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "{dtype}");
    }
}

#[test]
fn dequantize_writes_half_precision() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "w.nt", &[2, 128], normal_matrix(2, 128, 6).data);
    let q = dir.path().join("w.rzr");
    ok(&["quantize", "--input", s(&input), "--dtype", "int4", "--output", s(&q)]);
    let (f32p, f16p) = (dir.path().join("a.nt"), dir.path().join("b.nt"));
    ok(&["dequantize", "--input", s(&q), "--output", s(&f32p)]);
    ok(&["dequantize", "--input", s(&q), "--output", s(&f16p), "--format", "f16"]);
    let full = std::fs::read(&f32p).unwrap();
    let half = std::fs::read(&f16p).unwrap();
    assert_eq!(full.len() - half.len(), 256 * 2);
    assert_eq!(half[4], 1);
    assert_eq!(code(&["dequantize", "--input", s(&q), "--output", s(&f16p), "--format", "bf16"]), 1);
}

#[test]
fn sweep_rows_and_grid_exact_zeros() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "g.nt", &[4, 256], grid_exact(fp3_grid().grid(), 4, 256, 0.5));
    let rows = csv_rows(&ok(&["sweep-sv", "--input", s(&input), "--range", "2:14", "--step", "1"]));
    assert_eq!(rows.len(), 13);
    let v = schema("sweep_row.schema.json");
    for r in &rows {
        assert_valid(&v, r);
        assert_eq!(r["razer_err"], 0.0);
        assert_eq!(r["fp_baseline_err"], 0.0);
    }
    let mags: Vec<f64> = rows.iter().map(|r| r["sv_magnitude"].as_f64().unwrap()).collect();
    assert_eq!(mags.first(), Some(&2.0));
    assert_eq!(mags.last(), Some(&14.0));
}

#[test]
fn sweep_on_gaussian_has_interior_minimum_between_4_and_9() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "n.nt", &[256, 1024], normal_matrix(256, 1024, 0).data);
    let csv_path = dir.path().join("curve.csv");
    ok(&["sweep-sv", "--input", s(&input), "--range", "2:14", "--csv", s(&csv_path)]);
    let rows = csv_rows(&std::fs::read_to_string(&csv_path).unwrap());
    let errs: Vec<f64> = rows.iter().map(|r| r["razer_err"].as_f64().unwrap()).collect();
    let best = (0..errs.len()).min_by(|&a, &b| errs[a].total_cmp(&errs[b])).unwrap();
    assert!(best > 0 && best < errs.len() - 1, "{errs:?}");
    let m = rows[best]["sv_magnitude"].as_f64().unwrap();
    assert!((4.0..=9.0).contains(&m), "argmin at {m}");
    assert!(errs[best] < rows[best]["fp_baseline_err"].as_f64().unwrap());
    assert!(rows.iter().all(|r| r["int_baseline_err"] == 1.0));
}

fn write_layer_dir(dir: &TempDir, layers: usize) -> PathBuf {
    let root = dir.path().join("layers");
    std::fs::create_dir(&root).unwrap();
    for i in 0..layers {
        let dirn = if i % 2 == 0 { 1.0 } else { -1.0 };
        let w = razer_core::synth::planted_outlier_layer(16, 256, 128, dirn, 40 + i as u64);
        let t = NtTensor::new(vec![16, 256], w.data).unwrap();
        std::fs::write(root.join(format!("l{i}.nt")), ntfile::to_bytes(&t, NtDtype::F32).unwrap()).unwrap();
    }
    root
}

#[test]
fn calibrate_single_layer_report() {
    let dir = TempDir::new().unwrap();
    let root = write_layer_dir(&dir, 1);
    let kv = NtTensor::new(vec![32, 64], normal_matrix(32, 64, 2).data).unwrap();
    std::fs::write(root.join("l0.kv.nt"), ntfile::to_bytes(&kv, NtDtype::F16).unwrap()).unwrap();
    let out = dir.path().join("sv.json");
    ok(&["calibrate", "--layers", s(&root), "--budget", "60", "--seed", "1", "--out", s(&out)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_valid(&schema("calibration_report.schema.json"), &report);
    assert_eq!(report["layers"].as_array().unwrap().len(), 1);
    let sorted = |v: &Value| {
        let mut x: Vec<f64> = v.as_array().unwrap().iter().map(|e| e.as_f64().unwrap()).collect();
        x.sort_by(f64::total_cmp);
        x
    };
    assert_eq!(sorted(&report["model_weight_set"]), sorted(&report["layers"][0]["weight_set"]));
    assert_eq!(sorted(&report["model_kv_set"]), sorted(&report["layers"][0]["kv_set"]));
}

#[test]
fn calibrate_beats_manual_set_on_planted_outliers() {
    let dir = TempDir::new().unwrap();
    let root = write_layer_dir(&dir, 3);
    let out = dir.path().join("sv.json");
    ok(&["calibrate", "--layers", s(&root), "--budget", "100", "--seed", "0", "--out", s(&out)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_valid(&schema("calibration_report.schema.json"), &report);
    assert_eq!(report["model_kv_set"], Value::Null);
    let names: Vec<&str> = report["layers"].as_array().unwrap().iter().map(|l| l["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["l0", "l1", "l2"]);
    let model = report["model_weight_objective"].as_f64().unwrap();
    let manual = report["manual_weight_objective"].as_f64().unwrap();
    assert!(model <= manual, "{model} > {manual}");
}

#[test]
fn kv_sim_counts_flushes() {
    let rows = csv_rows(&ok(&["kv-sim", "--tokens", "10", "--buffer", "4", "--dim", "64"]));
    assert_eq!(rows.len(), 10);
    let v = schema("kv_sim_row.schema.json");
    rows.iter().for_each(|r| assert_valid(&v, r));
    assert_eq!(rows[9]["flush_events"], 2);
    assert_eq!(rows.iter().filter(|r| r["flushed"] == true).count(), 2);
}

#[test]
fn kv_sim_fp16_passthrough_is_exact() {
    let rows = csv_rows(&ok(&["kv-sim", "--tokens", "130", "--dtype", "fp16"]));
    assert!(rows.iter().all(|r| r["attn_error"] == 0.0));
    assert_eq!(rows[129]["flush_events"], 2);
}

#[test]
fn kv_sim_fp4rzr_beats_int4_on_most_seeds() {
    let mean = |dtype: &str, seed: u64| {
        let rows = csv_rows(&ok(&["kv-sim", "--tokens", "256", "--dtype", dtype, "--seed", &seed.to_string()]));
        rows.iter().map(|r| r["attn_error"].as_f64().unwrap()).sum::<f64>() / rows.len() as f64
    };
    let seeds = 20usize;
    let wins = (0..seeds as u64).filter(|&s| mean("fp4rzr", s) < mean("int4", s)).count();
    println!("fp4rzr lower attention error on {wins}/{seeds} seeds");
    assert!(wins * 10 >= seeds * 9, "fp4rzr won {wins}/{seeds}");
}

#[test]
fn bench_reports_rows_and_payload() {
    let dir = TempDir::new().unwrap();
    let csv_path = dir.path().join("bench.csv");
    ok(&[
        "bench-gemv", "--shapes", "64x512,13824x5120", "--reps", "3", "--self-check", "--csv", s(&csv_path),
    ]);
    let rows = csv_rows(&std::fs::read_to_string(&csv_path).unwrap());
    let v = schema("bench_row.schema.json");
    rows.iter().for_each(|r| assert_valid(&v, r));
    let keys: Vec<(&str, &str)> =
        rows.iter().map(|r| (r["shape"].as_str().unwrap(), r["path"].as_str().unwrap())).collect();
    assert_eq!(
        keys,
        [("64x512", "fused"), ("64x512", "reference"), ("13824x5120", "fused"), ("13824x5120", "reference")]
    );
    let big = &rows[2];
    let payload = big["payload_bytes"].as_u64().unwrap();
    assert!((payload as f64 / (1u64 << 20) as f64 - 33.75).abs() < 33.75 * 0.005);
    assert_eq!(big["baseline_bytes"].as_u64().unwrap(), 4 * payload);
}

#[test]
fn synth_writes_requested_shape() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("o.nt");
    ok(&["synth", "--kind", "outlier", "--rows", "3", "--cols", "256", "--direction", "-1", "--output", s(&p)]);
    let t = read(&p);
    assert_eq!(t.dims, [3, 256]);
    let min = t.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = t.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    assert!(-min > 2.0 * max);
    assert_eq!(code(&["synth", "--kind", "laplace", "--rows", "3", "--cols", "4", "--output", s(&p)]), 1);
}
