use std::process::Command;

use promptq_core::calib::{observe, Metric};
use promptq_core::model::{build_model, ModelConfig, PromptSpec};
use promptq_core::Model64;
use promptq_harness::config::{BitPair, ExperimentConfig, ReconMode};
use promptq_harness::data::{calib_and_eval, gen_prompts, gen_synthetic_images};
use promptq_harness::inject::{inject_outliers, iqr_scale, OutlierSpec};
use promptq_harness::report::{emit_report, Format, Report, CSV_COLUMNS};
use promptq_harness::sweep_theta;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seeds: vec![0, 1],
        bits: vec![BitPair::new(8, 8)],
        methods: vec![Metric::Pcc],
        recon_modes: vec![ReconMode::None],
        n_calib: 2,
        n_eval: 1,
        ..Default::default()
    };
    cfg.calib.grid.steps = 12;
    cfg
}

#[test]
fn data_is_seeded() {
    let cfg = ModelConfig::default();
    let a = gen_synthetic_images(3, 7, &cfg);
    let b = gen_synthetic_images(3, 7, &cfg);
    let c = gen_synthetic_images(3, 8, &cfg);
    assert_eq!(a, b);
    assert_ne!(a[0].image, c[0].image);
    // Changing the calibration count leaves the evaluation items intact.
    let (_, e1) = calib_and_eval(7, &cfg, 2, 3).unwrap();
    let (_, e2) = calib_and_eval(7, &cfg, 5, 3).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn prompts_target_the_brightest_blob() {
    let cfg = ModelConfig::default();
    let imgs = gen_synthetic_images(6, 3, &cfg);
    for (img, ps) in imgs.iter().zip(gen_prompts(&imgs, 3, cfg.image_size)) {
        let b = img.brightest();
        assert_eq!(ps.len(), 2);
        let PromptSpec::Point { x, y, foreground: true } = ps[0] else { panic!("first prompt is a foreground point") };
        assert!((x - b.cx).abs() <= 0.3 * b.sigma + 1e-9 && (y - b.cy).abs() <= 0.3 * b.sigma + 1e-9);
        let PromptSpec::Box { x0, y0, x1, y1 } = ps[1] else { panic!("second prompt is a box") };
        assert!(x0 <= b.cx && b.cx <= x1 && y0 <= b.cy && b.cy <= y1);
    }
}

#[test]
fn injection_reaches_the_requested_ratio() {
    let cfg = ModelConfig { seed: 4, ..Default::default() };
    let mut m: Model64 = build_model(&cfg).unwrap();
    let (calib, _) = calib_and_eval(4, &cfg, 3, 1).unwrap();
    let spec = OutlierSpec::default();
    let reports = inject_outliers(&mut m, &spec, &calib).unwrap();
    assert_eq!(reports.len(), spec.targets.len());
    let obs = observe(&m, &calib).unwrap();
    for r in &reports {
        // Independent measurement on the modified model.
        let mut all: Vec<f64> = obs.acts[&r.target].iter().flat_map(|t| t.data().iter().copied()).collect();
        let max_abs = all.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let ratio = max_abs / iqr_scale(&mut all);
        assert!(ratio >= 0.8 * spec.magnitude, "{}: {ratio}", r.target);
        assert!((ratio - r.ratio).abs() <= 1e-6 * r.ratio);
    }
}

#[test]
fn theta_sweep_has_one_record_per_theta_and_seed() {
    let thetas = [0.4, 0.6];
    let report = sweep_theta(&tiny(), &thetas).unwrap();
    for seed in [0, 1] {
        for th in thetas {
            let n = report.records.iter().filter(|r| r.seed == seed && r.method == Metric::Pcc && r.theta == th).count();
            assert_eq!(n, 1);
        }
        assert_eq!(report.records.iter().filter(|r| r.seed == seed && r.method == Metric::Mse).count(), 1);
    }
    let seeds: Vec<u64> = report.records.iter().map(|r| r.seed).collect();
    assert!(seeds.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn report_files_are_stable() {
    let report = promptq_harness::run_experiment(&ExperimentConfig { seeds: vec![2], ..tiny() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    emit_report(&report, Format::Json, &a).unwrap();
    emit_report(&Report::load(&a).unwrap(), Format::Json, &b).unwrap();
    assert_eq!(std::fs::read_to_string(&a).unwrap(), std::fs::read_to_string(&b).unwrap());
    let csv = dir.path().join("r.csv");
    emit_report(&report, Format::for_path(&csv), &csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 1 + report.records.len());
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_promptq");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seeds = [0]\nunknown_key = 1\n").unwrap();
    let st = Command::new(bin).args(["evaluate", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = Command::new(bin).args(["calibrate", "--bits", "W4"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));

    let good = dir.path().join("good.toml");
    std::fs::write(&good, tiny().to_toml().unwrap()).unwrap();
    let out = dir.path().join("r.json");
    let st = Command::new(bin).args(["evaluate", "--seed", "1", "--config"]).arg(&good).arg("--out").arg(&out).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let merged = dir.path().join("m.csv");
    let st = Command::new(bin).arg("report").arg("--input").arg(&out).arg("--input").arg(&out).arg("--out").arg(&merged).output().unwrap();
    assert!(st.status.success());
    assert_eq!(std::fs::read_to_string(&merged).unwrap().lines().count(), 3);
}
