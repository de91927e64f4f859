use promptq_core::calib::{calibrate_model, observe, CalibItem, CalibPolicy, Metric, TensorKind};
use promptq_core::model::{build_model, ModelConfig, PromptSpec};
use promptq_core::{Model64, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn items(n: usize, seed: u64) -> Vec<CalibItem<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| CalibItem {
            image: Tensor::randn(&[3, 64, 64], 1.0, &mut rng),
            prompts: vec![
                PromptSpec::Point { x: 20.0, y: 30.0, foreground: true },
                PromptSpec::Box { x0: 10.0, y0: 12.0, x1: 40.0, y1: 44.0 },
            ],
        })
        .collect()
}

#[test]
fn every_hook_calibrated_by_its_rule() {
    let m: Model64 = build_model(&ModelConfig::default()).unwrap();
    let it = items(2, 1);
    let obs = observe(&m, &it).unwrap();
    let policy = CalibPolicy::for_method(Metric::Pcc, 6, 6);
    let c = calibrate_model(&m, &it, &policy).unwrap();
    let acts: Vec<_> = c.records.iter().filter(|r| r.kind == TensorKind::Activation).collect();
    assert_eq!(acts.len(), obs.acts.len());
    for r in acts {
        assert_eq!(r.metric, policy.metric_for(&r.name).unwrap(), "{}", r.name);
        // Bounds are scaled toward 0, so they stay inside the observed
        // range extended to include 0 (softmax has a positive minimum).
        let (lo, up) = obs.acts[&r.name]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
        let (l, u) = (r.x_low.to_vec()[0], r.x_up.to_vec()[0]);
        if up > lo {
            assert!(l >= lo - 1e-12 && u <= up + 1e-12, "{}: [{l}, {u}] outside [{lo}, {up}]", r.name);
        }
    }
    assert!(c.records.iter().any(|r| r.kind == TensorKind::Weight && r.metric == Metric::Mse));
}

#[test]
fn calibration_is_deterministic() {
    let m: Model64 = build_model(&ModelConfig { seed: 5, ..Default::default() }).unwrap();
    let it = items(2, 2);
    let policy = CalibPolicy::for_method(Metric::Pcc, 4, 4);
    let a = calibrate_model(&m, &it, &policy).unwrap();
    let b = calibrate_model(&m, &it, &policy).unwrap();
    assert_eq!(a.records, b.records);
}
