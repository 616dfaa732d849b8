//! Acceptance checks. Every test prints one `criterion N: PASS|FAIL` line
//! before asserting.

use std::io::Write;
use std::time::Instant;

use half::f16;
use rand::Rng;
use rand_distr::{Distribution, StudentT};

use razer_core::codec::{container, pack_fp3, pack_fp4, unpack_fp3, unpack_fp4};
use razer_core::fastcast::{encode_half_to_razer4, razer4_to_half_fast, razer4_to_half_lookup, Fp4Symbol};
use razer_core::kernels::gemv::dequantize_matrix;
use razer_core::kernels::{gemv_fused, gemv_reference};
use razer_core::numerics::{fp3_grid, fp4_grid};
use razer_core::quantizer::{
    dequantize_group, encode_fixed_scale, mse, quantize_group, quantize_group_fp, GroupParams, Scheme,
};
use razer_core::svsearch::{calibrate_model, layer_objective, sweep_sv_error, SweepCurve};
use razer_core::synth::{normal_matrix, normal_vec, planted_outlier_layer, rng};
use razer_core::{
    effective_bits, quantize_tensor, CalibrationConfig, Dtype, KvCacheState, KvFormat, LayerSpec, QuantConfig,
    QuantizedMatrix, SvHalfTable, SvSet,
};

/// Written to the raw stderr handle so the line shows without `--nocapture`.
fn report(n: u32, pass: bool, detail: String, started: Instant) {
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n}: {} ({detail}; {:.2}s)",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_01_effective_bits_rows() {
    let t = Instant::now();
    // (code bits, group, scale bits, metadata bits, expected, printed)
    let rows = [
        ("INT4", 4, 128, 8, 4, 4.09375, "4.09"),
        ("NF4", 4, 128, 8, 0, 4.0625, "4.06"),
        ("LUT", 4, 128, 16 * 16, 0, 6.0, "6.00"),
        ("RaZeR", 4, 128, 8, 2, 4.078125, "4.08"),
    ];
    let mut bad = Vec::new();
    for (name, c, g, s, m, want, shown) in rows {
        let got = effective_bits(c, g, s, m).unwrap();
        if got != want || format!("{got:.2}") != shown {
            bad.push(format!("{name}={got}"));
        }
    }
    report(1, bad.is_empty(), format!("4 rows exact, mismatches {bad:?}"), t);
    assert!(bad.is_empty());
}

#[test]
fn criterion_02_fast_cast_equals_lookup() {
    let t = Instant::now();
    let table = SvHalfTable([0x4500, 0x4800, 0xC500, 0xC800]);
    assert_eq!(table, SvHalfTable::default());
    let mut mismatches = 0;
    for code in 0..16u8 {
        for idx in 0..4u8 {
            if razer4_to_half_fast(code, idx, &table) != razer4_to_half_lookup(code, idx, &table) {
                mismatches += 1;
            }
        }
    }
    report(2, mismatches == 0, format!("64 (code, index) pairs, {mismatches} mismatches"), t);
    assert_eq!(mismatches, 0);
}

#[test]
fn criterion_03_positive_encoding_rows() {
    let t = Instant::now();
    let rows: [(f32, u8); 8] = [
        (0.0, 0b0010),
        (0.5, 0b0000),
        (1.0, 0b0100),
        (1.5, 0b0110),
        (2.0, 0b1000),
        (3.0, 0b1010),
        (4.0, 0b1100),
        (6.0, 0b1110),
    ];
    let table = SvHalfTable::default();
    let mut bad = Vec::new();
    for (v, code) in rows {
        let bits = f16::from_f32(v).to_bits();
        let ok = razer4_to_half_fast(code, 0, &table).0 == bits
            && razer4_to_half_lookup(code, 3, &table).0 == bits
            && encode_half_to_razer4(Fp4Symbol::Value(v)).unwrap() == code;
        if !ok {
            bad.push(v);
        }
    }
    let sv_ok = (0..4u8).all(|i| razer4_to_half_fast(0b0011, i, &table).0 == table.get(i));
    let pass = bad.is_empty() && sv_ok && rows[1].0 == 0.5 && f16::from_f32(6.0).to_bits() == 0x4600;
    report(3, pass, format!("8 rows plus the special code, bad rows {bad:?}"), t);
    assert!(pass);
}

#[test]
fn criterion_04_superset_grid_never_worse() {
    let t = Instant::now();
    let spec = fp4_grid();
    let sets = [SvSet::fp4_default(), SvSet::manual()];
    let mut worse = 0;
    for seed in 0..1000u64 {
        let x = normal_vec(128, seed);
        let q = quantize_group_fp(&x, spec, 1.0).unwrap();
        let GroupParams::Fp { scale } = q.params else { unreachable!() };
        let (_, fp) = encode_fixed_scale(&x, spec, None, scale);
        for set in &sets {
            for &sv in set.values() {
                let (_, rz) = encode_fixed_scale(&x, spec, Some(sv), scale);
                if rz > fp {
                    worse += 1;
                }
            }
        }
    }
    report(4, worse == 0, format!("1000 groups x 8 special values, {worse} worse than FP4"), t);
    assert_eq!(worse, 0);
}

struct ShapeCheck {
    interior: bool,
    in_band: bool,
    below_int: bool,
}

fn fp3_curve(data: &[f32], rows: usize, cols: usize) -> SweepCurve {
    let mags: Vec<f32> = (2..=14).map(|m| m as f32).collect();
    sweep_sv_error(data, &[rows, cols], fp3_grid(), &mags, 128).unwrap()
}

fn shape_of(curve: &SweepCurve) -> ShapeCheck {
    let best = curve.argmin().unwrap();
    ShapeCheck {
        interior: curve.has_interior_minimum(),
        in_band: (4.0..=9.0).contains(&best),
        below_int: curve
            .points
            .iter()
            .filter(|p| (5.0..=9.0).contains(&p.magnitude))
            .all(|p| p.razer_err < curve.int_baseline),
    }
}

#[test]
fn criterion_05_fp3_sweep_shape() {
    let t = Instant::now();
    let (rows, cols) = (256, 1024);
    let checks: Vec<ShapeCheck> = (0..50u64)
        .map(|seed| shape_of(&fp3_curve(&normal_matrix(rows, cols, seed).data, rows, cols)))
        .collect();
    let count = |f: fn(&ShapeCheck) -> bool| checks.iter().filter(|c| f(c)).count();
    let all = count(|c| c.interior && c.in_band && c.below_int);
    let pass = all * 10 >= 9 * checks.len();
    report(
        5,
        pass,
        format!(
            "{all}/50 seeds; interior minimum {}, argmin in [4,9] {}, 5..9 below INT3 {}",
            count(|c| c.interior),
            count(|c| c.in_band),
            count(|c| c.below_int)
        ),
        t,
    );
    assert!(pass, "{all}/50 seeds satisfy the curve shape");
}

/// Summed squared error of RaZeR, FP4 and asymmetric INT4 over `groups`.
fn datatype_errors(groups: &[Vec<f32>]) -> [f64; 3] {
    let set = SvSet::fp4_default();
    let schemes = [
        Scheme::Razer(fp4_grid(), &set),
        Scheme::Fp(fp4_grid()),
        Scheme::Int { bits: 4, beta: 1.0 },
    ];
    let mut out = [0.0; 3];
    for x in groups {
        for (o, &s) in out.iter_mut().zip(&schemes) {
            let q = quantize_group(x, s, 1.0).unwrap();
            *o += mse(x, &dequantize_group(&q, s).unwrap()).unwrap();
        }
    }
    out
}

#[test]
fn criterion_06_datatype_ordering() {
    let t = Instant::now();
    let groups: Vec<Vec<f32>> = (0..1000u64).map(|s| normal_vec(128, 10_000 + s)).collect();
    let [rz, fp, int] = datatype_errors(&groups).map(|e| e / (1000.0 * 128.0));
    let pass = rz < fp && fp < int;
    report(6, pass, format!("mean MSE razer {rz:.6e}, fp4 {fp:.6e}, int4 {int:.6e}"), t);
    assert!(pass, "razer {rz} fp4 {fp} int4 {int}");
}

#[test]
fn criterion_07_codec_round_trips() {
    let t = Instant::now();
    let mut r = rng(7);
    let mut fp4_ok = 0;
    for _ in 0..10_000 {
        let n = r.random_range(1..=1024);
        let codes: Vec<u8> = (0..n).map(|_| r.random_range(0..16)).collect();
        let block = pack_fp4(&codes).unwrap();
        let back = razer_core::PackedFp4Block::from_le_bytes(&block.to_le_bytes(), n).unwrap();
        fp4_ok += (unpack_fp4(&back).unwrap() == codes) as usize;
    }

    let mut fp3_ok = true;
    for pos in 0..128 {
        for code in 0..8u8 {
            let mut codes: Vec<u8> = (0..128).map(|_| r.random_range(0..8)).collect();
            codes[pos] = code;
            let planes = pack_fp3(&codes).unwrap();
            let back = razer_core::Fp3Planes::from_le_bytes(&planes.to_le_bytes());
            fp3_ok &= unpack_fp3(&back) == codes
                && (planes.sign >> pos) as u8 & 1 == code & 1
                && (planes.exp_lo >> pos) as u8 & 1 == (code >> 1) & 1
                && (planes.exp_hi >> pos) as u8 & 1 == (code >> 2) & 1;
        }
    }

    let mut containers_ok = true;
    for dtype in Dtype::ALL {
        let data = normal_vec(4 * 300, 3);
        let cols = if dtype == Dtype::Fp3Razer { 256 } else { 300 };
        let dims = [data.len() / cols, cols];
        let data = &data[..dims[0] * cols];
        let sv = dtype.is_razer().then(|| SvSet::manual());
        let qt = quantize_tensor(data, &dims, &QuantConfig::new(dtype, 128), sv.as_ref()).unwrap();
        let first = container::to_bytes(&qt).unwrap();
        let again = container::to_bytes(&container::from_bytes(&first).unwrap()).unwrap();
        containers_ok &= first == again;
    }
    let pass = fp4_ok == 10_000 && fp3_ok && containers_ok;
    report(
        7,
        pass,
        format!("fp4 {fp4_ok}/10000 blocks, fp3 1024 plane positions ok={fp3_ok}, containers ok={containers_ok}"),
        t,
    );
    assert!(pass);
}

#[test]
fn criterion_08_fused_gemv_bit_exact() {
    let t = Instant::now();
    let mut r = rng(8);
    let mut exact = 0;
    for i in 0..100u64 {
        let n = r.random_range(1..=96);
        let k = r.random_range(2..=1024);
        let g = [16, 32, 64, 128, 256][r.random_range(0..5)];
        let wq = QuantizedMatrix::random(n, k, g, i).unwrap();
        let x = normal_vec(k, 1000 + i);
        let a = gemv_fused(&wq, &x).unwrap();
        let b = gemv_reference(&dequantize_matrix(&wq).unwrap(), &x).unwrap();
        exact += a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()) as usize;
    }
    report(8, exact == 100, format!("{exact}/100 random (N, K, g) bit-exact"), t);
    assert_eq!(exact, 100);
}

#[test]
fn criterion_09_kv_buffering_contract() {
    let t = Instant::now();
    let dim = 16;
    let token = |i: usize| -> Vec<f32> { (0..dim).map(|j| ((i * 31 + j * 7) % 13) as f32 - 6.0).collect() };
    let mut violations = Vec::new();
    for ti in 1..=50 {
        let tokens = ti * 3;
        for capacity in 1..=10 {
            let mut s = KvCacheState::new(dim, capacity, 8, KvFormat::Quantized(Dtype::Fp4Razer), Some(SvSet::fp4_default()))
                .unwrap();
            let mut conserved = true;
            for i in 0..tokens {
                s.append(&token(i), &token(i + 1)).unwrap();
                conserved &= capacity * s.blocks().len() + s.buffered() == s.total_tokens();
            }
            if !conserved || s.flush_events() != tokens / capacity || s.total_tokens() != tokens {
                violations.push((tokens, capacity));
            }
        }
    }
    let pass = violations.is_empty();
    report(9, pass, format!("500 (T, n_b) pairs, violations {violations:?}"), t);
    assert!(pass);
}

#[test]
fn criterion_10_calibration_beats_manual() {
    let t = Instant::now();
    let spec = fp4_grid();
    let mut wins = 0;
    for seed in 0..50u64 {
        let layers = vec![
            LayerSpec::weights_only("up", planted_outlier_layer(32, 512, 128, 1.0, 2 * seed)),
            LayerSpec::weights_only("down", planted_outlier_layer(32, 512, 128, -1.0, 2 * seed + 1)),
        ];
        let cfg = CalibrationConfig::new(Dtype::Fp4Razer, Dtype::Fp4Razer, 200, seed);
        let rep = calibrate_model(&layers, &cfg).unwrap();
        let manual: f64 = layers
            .iter()
            .map(|l| layer_objective(&l.weights, None, spec, SvSet::manual().values(), 128))
            .sum();
        assert_eq!(manual, rep.manual_weight_objective);
        wins += (rep.model_weight_objective <= manual) as usize;
    }
    let pass = wins * 10 >= 9 * 50;
    report(10, pass, format!("calibrated <= manual on {wins}/50 seeds"), t);
    assert!(pass);
}

#[test]
fn criterion_11_payload_capacity() {
    let t = Instant::now();
    let (n, k) = (13824, 5120);
    let wq = QuantizedMatrix::random(n, k, 128, 0).unwrap();
    let mib = wq.payload_bytes() as f64 / (1u64 << 20) as f64;
    let rel = (mib - 33.75).abs() / 33.75;
    let container = container::Layout::new(Dtype::Fp4Razer, 2, n * k / 128, 128).total();
    let pass = rel < 0.005 && wq.payload_bytes() == n * k / 2;
    report(
        11,
        pass,
        format!(
            "payload {} bytes = {mib} MiB (rel. diff {rel:.2e}); full container {container} bytes",
            wq.payload_bytes()
        ),
        t,
    );
    assert!(pass);
}

fn student_t(n: usize, dof: f64, seed: u64) -> Vec<f32> {
    let d = StudentT::new(dof).unwrap();
    let mut r = rng(seed);
    (0..n).map(|_| d.sample(&mut r) as f32).collect()
}

/// The statistical claims on long-tailed groups, where the special value and
/// the FP grid have outliers to serve.
#[test]
fn supplementary_heavy_tailed_data() {
    let groups: Vec<Vec<f32>> = (0..1000u64).map(|s| student_t(128, 5.0, 20_000 + s)).collect();
    let [rz, fp, int] = datatype_errors(&groups);
    println!("supplementary: student-t(5) summed MSE razer {rz:.1}, fp4 {fp:.1}, int4 {int:.1}");
    assert!(rz < fp);
    assert!(rz < int);

    let shapes: Vec<ShapeCheck> = (0..20u64)
        .map(|s| shape_of(&fp3_curve(&student_t(64 * 1024, 5.0, 30_000 + s), 64, 1024)))
        .collect();
    let ok = shapes.iter().filter(|c| c.interior && c.in_band && c.below_int).count();
    println!("supplementary: student-t(5) fp3 sweep shape holds on {ok}/20 seeds");
    assert!(ok * 10 >= 9 * 20);
}
