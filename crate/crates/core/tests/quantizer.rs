//! Quantizer against a scalar reference, fixtures and invariants.

use promptq_core::quant::{affine_from_bounds, dequantize, fake_quant, quantize, QuantParams};
use promptq_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain reimplementation: scale, zero-point, code, value.
fn reference(x: f64, low: f64, up: f64, bits: u32) -> (i64, f64) {
    let n = ((1u64 << bits) - 1) as f64;
    let s = (up - low) / n;
    let z = (-low / s).round_ties_even().clamp(0.0, n);
    let q = ((x / s).round_ties_even() + z).clamp(0.0, n);
    (q as i64, s * (q - z))
}

#[test]
fn matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for bits in [2, 4, 6, 8, 16] {
        let low = rng.random_range(-10.0..-0.1);
        let up = rng.random_range(0.1..10.0);
        let data: Vec<f64> = (0..100_000).map(|_| rng.random_range(1.5 * low..1.5 * up)).collect();
        let x = Tensor::new(vec![data.len()], data.clone()).unwrap();
        let qp = QuantParams::per_tensor(low, up, bits).unwrap();
        let codes = quantize(&x, &qp).unwrap();
        let back = dequantize(&codes, &qp).unwrap();
        let fq = fake_quant(&x, &qp).unwrap();
        let s = qp.scale()[0];
        let (lo_rep, up_rep) = (s * -(qp.zero_point()[0] as f64), s * ((1i64 << bits) - 1 - qp.zero_point()[0]) as f64);
        for (i, &v) in data.iter().enumerate() {
            let (q, d) = reference(v, low, up, bits);
            assert_eq!(codes.codes[i], q, "b={bits} x={v}");
            assert_eq!(back.data()[i], d, "b={bits} x={v}");
            assert_eq!(fq.data()[i], d, "b={bits} x={v}");
            if v >= lo_rep && v <= up_rep {
                assert!((d - v).abs() <= s / 2.0 * (1.0 + 1e-12), "b={bits} x={v} err {}", (d - v).abs());
            }
        }
    }
}

#[test]
fn affine_fixtures() {
    let (s, z, _) = affine_from_bounds(-5.0f64, 5.0, 6).unwrap();
    assert!((s - 10.0 / 63.0).abs() <= 1e-12);
    assert_eq!(z, 32);
    let (s, z, _) = affine_from_bounds(-167.0f64, 177.0, 6).unwrap();
    assert!((s - 344.0 / 63.0).abs() <= 1e-12);
    assert_eq!(z, 31);
}

fn range() -> impl Strategy<Value = (f64, f64)> {
    (-50.0f64..50.0, 0.01f64..100.0).prop_map(|(lo, w)| (lo, lo + w))
}

proptest! {
    #[test]
    fn codes_stay_on_the_grid((lo, up) in range(), bits in 2u32..=16, xs in prop::collection::vec(-500.0f64..500.0, 1..64)) {
        let qp = QuantParams::per_tensor(lo, up, bits).unwrap();
        let x = Tensor::new(vec![xs.len()], xs).unwrap();
        let q = quantize(&x, &qp).unwrap();
        let n = (1i64 << bits) - 1;
        prop_assert!(q.codes.iter().all(|&c| (0..=n).contains(&c)));
    }

    #[test]
    fn fake_quant_is_idempotent((lo, up) in range(), bits in 2u32..=12, xs in prop::collection::vec(-200.0f64..200.0, 1..64)) {
        let qp = QuantParams::per_tensor(lo, up, bits).unwrap();
        let x = Tensor::new(vec![xs.len()], xs).unwrap();
        let once = fake_quant(&x, &qp).unwrap();
        let twice = fake_quant(&once, &qp).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn fake_quant_is_monotone((lo, up) in range(), bits in 2u32..=12, mut xs in prop::collection::vec(-200.0f64..200.0, 2..64)) {
        xs.sort_by(f64::total_cmp);
        let qp = QuantParams::per_tensor(lo, up, bits).unwrap();
        let y = fake_quant(&Tensor::new(vec![xs.len()], xs).unwrap(), &qp).unwrap();
        prop_assert!(y.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn scale_and_zero_point_relation((lo, up) in range(), bits in 2u32..=16) {
        let (s, z, clamped) = affine_from_bounds(lo, up, bits).unwrap();
        let n = (1i64 << bits) - 1;
        prop_assert!((s * n as f64 - (up - lo)).abs() <= 1e-9 * (up - lo));
        prop_assert!((0..=n).contains(&z));
        if !clamped {
            prop_assert!(((-lo / s) - z as f64).abs() <= 0.5 + 1e-9);
        }
    }
}
