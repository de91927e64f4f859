//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=5,6` runs a subset.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use promptq_core::autodiff::{finite_diff_grad, max_grad_error, relative_error, Tape, Var};
use promptq_core::calib::{dist_pcc, focus_mask, focus_mask_scoped, iou_af, MaxScope, Metric};
use promptq_core::model::{stage_partition, LayerKind, LN_EPS};
use promptq_core::quant::{affine_from_bounds, dequantize, fake_quant, levels, quantize, Granularity, QuantParams, QuantSpec, RoundingMode};
use promptq_core::recon::UnitGranularity;
use promptq_core::Tensor;
use promptq_harness::config::{BitPair, ExperimentConfig, ReconMode};
use promptq_harness::experiment::{run_experiment, run_specs, sweep_theta, RunSpec};
use promptq_harness::report::{ReportKind, RunRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(pass: bool, elapsed: Duration, limit_s: f64, detail: String) -> Outcome {
    let t = elapsed.as_secs_f64();
    outcome(pass && t < limit_s, format!("{detail}; {t:.1}s (limit {limit_s}s)"))
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// 1 -------------------------------------------------------------------------

fn reference_quant(x: f64, low: f64, up: f64, bits: u32) -> (i64, f64) {
    let n = ((1u64 << bits) - 1) as f64;
    let s = (up - low) / n;
    let z = (-low / s).round_ties_even().clamp(0.0, n);
    let q = ((x / s).round_ties_even() + z).clamp(0.0, n);
    (q as i64, s * (q - z))
}

fn c01() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut mismatches, mut worst_ratio) = (0usize, 0.0f64);
    let mut total = 0;
    for bits in [2, 4, 6, 8, 16] {
        let low = rng.random_range(-10.0..-0.1);
        let up = rng.random_range(0.1..10.0);
        let data: Vec<f64> = (0..100_000).map(|_| rng.random_range(1.5 * low..1.5 * up)).collect();
        let qp = QuantParams::per_tensor(low, up, bits).unwrap();
        let x = Tensor::new(vec![data.len()], data.clone()).unwrap();
        let codes = quantize(&x, &qp).unwrap();
        let back = dequantize(&codes, &qp).unwrap();
        let fq = fake_quant(&x, &qp).unwrap();
        let s = qp.scale()[0];
        let z = qp.zero_point()[0];
        let (lo_rep, up_rep) = (-s * z as f64, s * (levels(bits) - z) as f64);
        for (i, &v) in data.iter().enumerate() {
            let (q, d) = reference_quant(v, low, up, bits);
            mismatches += (codes.codes[i] != q || back.data()[i] != d || fq.data()[i] != d) as usize;
            if (lo_rep..=up_rep).contains(&v) {
                worst_ratio = worst_ratio.max((d - v).abs() / s);
            }
        }
        total += data.len();
    }
    let pass = mismatches == 0 && worst_ratio <= 0.5 + 1e-12;
    within(pass, t.elapsed(), 5.0, format!("{mismatches} mismatches of {total}; max in-range error {worst_ratio:.6} s"))
}

// 2 -------------------------------------------------------------------------

fn c02() -> Outcome {
    let (s1, z1, _) = affine_from_bounds(-5.0f64, 5.0, 6).unwrap();
    let (s2, z2, _) = affine_from_bounds(-167.0f64, 177.0, 6).unwrap();
    let pass = (s1 - 10.0 / 63.0).abs() <= 1e-12 && z1 == 32 && (s2 - 344.0 / 63.0).abs() <= 1e-12 && z2 == 31;
    outcome(pass, format!("(-5,5,6) -> s={s1:.15}, z={z1}; (-167,177,6) -> s={s2:.15}, z={z2}"))
}

// 3 -------------------------------------------------------------------------

type Op = Box<dyn Fn(&Tape<f64>, &[Var]) -> promptq_core::Result<Var>>;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn off_zero(mut t: Tensor<f64>) -> Tensor<f64> {
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (v.abs() + 0.05));
    t
}

/// Each primitive with inputs drawn from `rng` and the inputs to check.
fn primitives(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Vec<usize>, Op)> {
    let spec = QuantSpec { bits: 4, granularity: Granularity::PerTensor };
    let one = |v: f64| Tensor::new(vec![1], vec![v]).unwrap();
    vec![
        ("matmul", vec![randn(&[3, 4], rng), randn(&[4, 5], rng)], vec![0, 1], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", vec![randn(&[3, 4], rng), randn(&[5, 4], rng)], vec![0, 1], Box::new(|t, v| t.matmul_nt(v[0], v[1]))),
        ("transpose", vec![randn(&[3, 4], rng)], vec![0], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![randn(&[3, 4], rng)], vec![0], Box::new(|t, v| t.reshape(v[0], vec![6, 2]))),
        ("add", vec![randn(&[2, 3], rng), randn(&[2, 3], rng)], vec![0, 1], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![randn(&[2, 3], rng), randn(&[2, 3], rng)], vec![0, 1], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![randn(&[2, 3], rng), randn(&[2, 3], rng)], vec![0, 1], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_bias", vec![randn(&[4, 3], rng), randn(&[3], rng)], vec![0, 1], Box::new(|t, v| t.add_bias(v[0], v[1]))),
        ("scale", vec![randn(&[5], rng)], vec![0], Box::new(|t, v| Ok(t.scale(v[0], 0.7)))),
        ("sum", vec![randn(&[3, 2], rng)], vec![0], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![randn(&[3, 2], rng)], vec![0], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("sum_squares", vec![randn(&[3, 2], rng)], vec![0], Box::new(|t, v| Ok(t.sum_squares(v[0])))),
        ("softmax", vec![randn(&[3, 5], rng)], vec![0], Box::new(|t, v| t.softmax(v[0]))),
        (
            "layer_norm",
            vec![randn(&[3, 5], rng), randn(&[5], rng), randn(&[5], rng)],
            vec![0, 1, 2],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], LN_EPS)),
        ),
        ("gelu", vec![randn(&[3, 4], rng)], vec![0], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("relu", vec![off_zero(randn(&[3, 4], rng))], vec![0], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("select_rows", vec![randn(&[4, 3], rng)], vec![0], Box::new(|t, v| t.select_rows(v[0], &[3, 1, 3]))),
        ("concat_rows", vec![randn(&[2, 3], rng), randn(&[1, 3], rng)], vec![0, 1], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![randn(&[2, 3], rng), randn(&[2, 2], rng)], vec![0, 1], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("slice_cols", vec![randn(&[2, 6], rng)], vec![0], Box::new(|t, v| t.slice_cols(v[0], 1, 4))),
        ("rounding_regularizer", vec![off_zero(randn(&[3, 3], rng))], vec![0], Box::new(|t, v| Ok(t.rounding_regularizer(v[0], 3.0)))),
        (
            "soft_rounding",
            vec![randn(&[3, 3], rng), one(-4.0), one(4.0), off_zero(randn(&[3, 3], rng))],
            vec![3],
            Box::new(move |t, v| t.fake_quant_weight(v[0], v[1], v[2], v[3], spec, RoundingMode::Soft)),
        ),
    ]
}

/// Finite differences of `s * (clip(x/s + delta + z, 0, n) - z)`, `z = -low/s`
/// continuous and the rounding residual `delta` frozen, against the tape's
/// straight-through gradients in `x`, `low` and `up`.
fn ste_envelope_error(rng: &mut ChaCha8Rng) -> f64 {
    let bits = 4;
    let n = levels(bits) as f64;
    let (low, up) = (rng.random_range(-3.0..-0.5), rng.random_range(0.5..3.0));
    let step = (up - low) / n;
    let x: Vec<f64> = (0..24)
        .map(|_| loop {
            let v = rng.random_range(low - 3.0..up + 3.0);
            if (v - low).abs() > 3.0 * step && (v - up).abs() > 3.0 * step {
                break v;
            }
        })
        .collect();
    let delta: Vec<f64> = x.iter().map(|v| (v / step).round_ties_even() - v / step).collect();
    let w: Vec<f64> = (0..x.len()).map(|i| (1.3 * i as f64 + 0.4).sin()).collect();
    let surrogate = |x: &[f64], lo: f64, hi: f64| -> f64 {
        let s = (hi - lo) / n;
        let z = -lo / s;
        x.iter().zip(&delta).zip(&w).map(|((v, d), w)| w * s * ((v / s + d + z).clamp(0.0, n) - z)).sum()
    };
    let tape = Tape::new();
    let xv = tape.param(Tensor::new(vec![x.len()], x.clone()).unwrap());
    let lv = tape.param(Tensor::new(vec![1], vec![low]).unwrap());
    let uv = tape.param(Tensor::new(vec![1], vec![up]).unwrap());
    let out = tape.fake_quant(xv, lv, uv, QuantSpec { bits, granularity: Granularity::PerTensor }).unwrap();
    let wv = tape.constant(Tensor::new(vec![x.len()], w.clone()).unwrap());
    let p = tape.mul(out, wv).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap();
    let h = 1e-6;
    let nx = finite_diff_grad(|t| surrogate(t.data(), low, up), &Tensor::new(vec![x.len()], x.clone()).unwrap(), h);
    let nl = finite_diff_grad(|t| surrogate(&x, t.data()[0], up), &Tensor::new(vec![1], vec![low]).unwrap(), h);
    let nu = finite_diff_grad(|t| surrogate(&x, low, t.data()[0]), &Tensor::new(vec![1], vec![up]).unwrap(), h);
    [(xv, nx), (lv, nl), (uv, nu)]
        .iter()
        .map(|(v, num)| relative_error(g.get(*v).unwrap(), num, 1e-6))
        .fold(0.0, f64::max)
}

fn c03() -> Outcome {
    let t = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        for (name, inputs, check, op) in primitives(&mut rng) {
            let e = max_grad_error(&inputs, &check, &*op, 1e-6, 1e-6).unwrap_or(f64::INFINITY);
            let w = worst.entry(name).or_default();
            *w = w.max(e);
        }
        let e = ste_envelope_error(&mut rng);
        let w = worst.entry("fake_quant_ste").or_default();
        *w = w.max(e);
    }
    let (name, err) = worst.iter().fold(("", 0.0), |a, (n, e)| if *e > a.1 { (n, *e) } else { a });
    let pass = worst.values().all(|e| *e <= 1e-4);
    within(pass, t.elapsed(), 30.0, format!("{} ops x 10 seeds; worst {name} at {err:.2e}", worst.len()))
}

// 4 -------------------------------------------------------------------------

fn c04() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    for trial in 0..500 {
        let (h, q, k) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..8));
        let a = Tensor::new(vec![h, q, k], (0..h * q * k).map(|_| rng.random::<f64>()).collect()).unwrap();
        let b = Tensor::new(vec![h, q, k], (0..h * q * k).map(|_| rng.random::<f64>()).collect()).unwrap();
        let theta = rng.random_range(0.05..0.95);
        if dist_pcc(&a, &a, theta).unwrap() != 0.0 {
            failures.push(format!("self distance, trial {trial}"));
        }
        for scope in [MaxScope::Global, MaxScope::PerRow] {
            let ma = focus_mask_scoped(&a, theta, scope).unwrap();
            let mb = focus_mask_scoped(&b, theta, scope).unwrap();
            let (ab, ba) = (iou_af(&ma, &mb).unwrap(), iou_af(&mb, &ma).unwrap());
            if ab != ba || !(0.0..=1.0).contains(&ab) {
                failures.push(format!("symmetry/bounds, trial {trial}"));
            }
        }
        let c = 2f64.powi(rng.random_range(-20..20));
        let sc = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v * c).collect()).unwrap();
        if focus_mask(&a, theta).unwrap() != focus_mask(&sc, theta).unwrap() {
            failures.push(format!("scaling by {c}, trial {trial}"));
        }
    }
    let fa = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let fb = Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let fixture = iou_af(&focus_mask(&fa, 0.5).unwrap(), &focus_mask(&fb, 0.5).unwrap()).unwrap();
    if fixture != 0.5 {
        failures.push(format!("fixture IoU {fixture}"));
    }
    let detail = if failures.is_empty() {
        format!("500 random trials; fixture IoU {fixture}")
    } else {
        failures[..failures.len().min(3)].join(", ")
    };
    outcome(failures.is_empty(), detail)
}

// 5, 6 ----------------------------------------------------------------------

fn six_bit() -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![0, 1, 2, 3, 4],
        bits: vec![BitPair::new(6, 6)],
        methods: vec![Metric::Mse, Metric::Pcc],
        recon_modes: vec![ReconMode::None],
        ..Default::default()
    }
}

fn by_seed<'a>(records: &'a [RunRecord], method: Metric) -> BTreeMap<u64, &'a RunRecord> {
    records.iter().filter(|r| r.method == method).map(|r| (r.seed, r)).collect()
}

fn target_widths(r: &RunRecord) -> Vec<f64> {
    r.clip_ranges.iter().filter_map(|c| c.width_sigma).collect()
}

fn c05() -> Outcome {
    let t = Instant::now();
    let report = run_experiment(&six_bit()).unwrap();
    let (mse, pcc) = (by_seed(&report.records, Metric::Mse), by_seed(&report.records, Metric::Pcc));
    let mut ok = 0;
    let mut rows = Vec::new();
    for (seed, p) in &pcc {
        let m = mse[seed];
        let (pw, mw) = (target_widths(p), target_widths(m));
        let narrow = pw.iter().all(|w| *w <= 20.0);
        let wide = mw.iter().all(|w| *w >= 100.0);
        let (pd, md) = (p.dist_pcc_targets.unwrap(), m.dist_pcc_targets.unwrap());
        let good = narrow && wide && pd <= md;
        ok += good as usize;
        let round = |v: &[f64]| v.iter().map(|w| format!("{w:.0}")).collect::<Vec<_>>().join("/");
        rows.push(format!(
            "seed {seed} {}: pcc {} vs mse {} sigma, dist {pd:.3} vs {md:.3}",
            if good { "ok" } else { "no" },
            round(&pw),
            round(&mw)
        ));
    }
    for r in &rows {
        println!("    {r}");
    }
    within(ok >= 4, t.elapsed(), 300.0, format!("{ok}/5 seeds satisfy all three conditions"))
}

fn c06() -> Outcome {
    let t = Instant::now();
    let report = run_experiment(&six_bit()).unwrap();
    let iou = |m: Metric| mean(report.records.iter().filter(|r| r.method == m).map(|r| r.mask_iou));
    let (p, m) = (iou(Metric::Pcc), iou(Metric::Mse));
    within(p >= m, t.elapsed(), 600.0, format!("mean mask IoU pcc {p:.4} vs mse {m:.4} over 5 seeds"))
}

// 7 -------------------------------------------------------------------------

fn c07() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig {
        seeds: vec![0, 1, 2, 3, 4],
        bits: vec![BitPair::new(4, 4)],
        ..Default::default()
    };
    let stage = UnitGranularity::PerStage;
    let specs = [
        RunSpec::new(Metric::Mse, ReconMode::Local).granularity(stage),
        RunSpec::new(Metric::Mse, ReconMode::Par).granularity(stage),
        RunSpec::new(Metric::Mse, ReconMode::Par).granularity(UnitGranularity::PerLayer),
        RunSpec::new(Metric::Pcc, ReconMode::Par).granularity(stage),
    ];
    let report = run_specs(&cfg, &specs, ReportKind::GranularitySweep).unwrap();
    let pick = |m: Metric, r: ReconMode, g: UnitGranularity| -> Vec<&RunRecord> {
        report.records.iter().filter(|x| x.method == m && x.recon == r && x.granularity == Some(g)).collect()
    };
    let local = pick(Metric::Mse, ReconMode::Local, stage);
    let par = pick(Metric::Mse, ReconMode::Par, stage);
    let par_layer = pick(Metric::Mse, ReconMode::Par, UnitGranularity::PerLayer);
    let par_pcc = pick(Metric::Pcc, ReconMode::Par, stage);
    let stages = local[0].hybrid_mse.len();
    let stage_mean = |rs: &[&RunRecord], k: usize| mean(rs.iter().map(|r| r.hybrid_mse[k]));
    let hm_par: Vec<f64> = (0..stages).map(|k| stage_mean(&par, k)).collect();
    let hm_local: Vec<f64> = (0..stages).map(|k| stage_mean(&local, k)).collect();
    let a = hm_par.iter().zip(&hm_local).all(|(p, l)| p <= l);
    let iou = |rs: &[&RunRecord]| mean(rs.iter().map(|r| r.mask_iou));
    let (i_local, i_par, i_pcc, i_layer) = (iou(&local), iou(&par), iou(&par_pcc), iou(&par_layer));
    let b = i_pcc >= i_par && i_par >= i_local;
    let c = i_par >= i_layer;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/");
    println!("    (a) {} hybrid MSE per stage: par {} vs local {}", if a { "ok" } else { "no" }, fmt(&hm_par), fmt(&hm_local));
    println!(
        "    (b) {} mask IoU: par+pcc {i_pcc:.4}, par {i_par:.4}, local {i_local:.4}",
        if b { "ok" } else { "no" }
    );
    println!("    (c) {} mask IoU: per-stage {i_par:.4} vs per-layer {i_layer:.4}", if c { "ok" } else { "no" });
    let parts = [a, b, c].iter().map(|p| if *p { "ok" } else { "no" }).collect::<Vec<_>>().join(" ");
    within(a && b && c, t.elapsed(), 1200.0, format!("(a)(b)(c): {parts}"))
}

// 8 -------------------------------------------------------------------------

fn c08() -> Outcome {
    let kinds: Vec<LayerKind> = (0..12)
        .map(|i| if [2, 5, 8, 11].contains(&i) { LayerKind::Global } else { LayerKind::Window })
        .collect();
    let plan = stage_partition(&kinds).unwrap();
    outcome(plan.stages == vec![0..=2, 3..=5, 6..=8, 9..=11], format!("{:?}", plan.stages))
}

// 9 -------------------------------------------------------------------------

fn c09() -> Outcome {
    let t = Instant::now();
    let thetas = [0.4, 0.5, 0.6, 0.7];
    let report = sweep_theta(&six_bit(), &thetas).unwrap();
    let mse = mean(report.records.iter().filter(|r| r.method == Metric::Mse).map(|r| r.mask_iou));
    let per_theta: Vec<f64> = thetas
        .iter()
        .map(|th| mean(report.records.iter().filter(|r| r.method == Metric::Pcc && r.theta == *th).map(|r| r.mask_iou)))
        .collect();
    let n_pcc = report.records.iter().filter(|r| r.method == Metric::Pcc).count();
    let beats = per_theta.iter().all(|p| *p >= mse);
    let spread = per_theta.iter().copied().fold(f64::NEG_INFINITY, f64::max) - per_theta.iter().copied().fold(f64::INFINITY, f64::min);
    let vals = per_theta.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join("/");
    let pass = beats && spread <= 0.05 && n_pcc == thetas.len() * 5;
    let t = t.elapsed();
    outcome(pass, format!("pcc IoU {vals} vs mse {mse:.4}; spread {spread:.4}; {n_pcc} records; {:.1}s", t.as_secs_f64()))
}

// 10 ------------------------------------------------------------------------

fn c10() -> Outcome {
    let mut cfg = ExperimentConfig {
        seeds: vec![3],
        bits: vec![BitPair::new(6, 6)],
        methods: vec![Metric::Pcc],
        recon_modes: vec![ReconMode::None, ReconMode::Par],
        n_calib: 4,
        n_eval: 2,
        ..Default::default()
    };
    cfg.recon.budget = 0.02;
    let a = run_experiment(&cfg).unwrap().without_runtime().to_json().unwrap();
    let b = run_experiment(&cfg).unwrap().without_runtime().to_json().unwrap();
    outcome(a == b, format!("{} vs {} bytes, identical: {}", a.len(), b.len(), a == b))
}

const DIRECTIONAL: [u32; 4] = [5, 6, 7, 9];

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "quantizer oracle", c01),
        (2, "affine fixtures", c02),
        (3, "gradcheck", c03),
        (4, "metric laws", c04),
        (5, "clip ranges under outliers", c05),
        (6, "mask IoU, focus-overlap vs MSE", c06),
        (7, "prompt-aware vs local reconstruction", c07),
        (8, "stage partition", c08),
        (9, "theta robustness", c09),
        (10, "determinism", c10),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let o = run();
        println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        return ExitCode::SUCCESS;
    }
    println!("failed criteria: {failed:?}");
    // Directional experiments report their outcome but only exact criteria
    // fail the target. Set ACCEPTANCE_STRICT=1 to fail on any criterion.
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict || failed.iter().any(|n| !DIRECTIONAL.contains(n)) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
