//! Tape gradients against central finite differences.

use promptq_core::autodiff::{finite_diff_grad, max_grad_error, relative_error, Tape, Var};
use promptq_core::model::LN_EPS;
use promptq_core::quant::{levels, Granularity, QuantSpec, RoundingMode};
use promptq_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;
const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

type Forward = dyn Fn(&Tape<f64>, &[Var]) -> Var;

/// Same output weighting as `max_grad_error`.
fn weigh(tape: &Tape<f64>, out: Var) -> Var {
    let shape = tape.shape(out);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.4).sin()).collect();
    let w = tape.constant(Tensor::new(shape, w).unwrap());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

fn gradcheck(name: &str, inputs: Vec<Tensor<f64>>, check: &[usize], f: &Forward) {
    let err = max_grad_error(&inputs, check, &|t, v| Ok(f(t, v)), H, 1e-6).unwrap();
    assert!(err <= TOL, "{name}: relative error {err:.3e}");
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries pushed at least `gap` away from zero, for kinked ops.
fn away_from_zero(mut t: Tensor<f64>, gap: f64) -> Tensor<f64> {
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (v.abs() + gap));
    t
}

fn for_seeds(mut body: impl FnMut(&mut ChaCha8Rng)) {
    for seed in 0..SEEDS {
        body(&mut ChaCha8Rng::seed_from_u64(1000 + seed));
    }
}

#[test]
fn linear_algebra() {
    for_seeds(|rng| {
        gradcheck("matmul", vec![randn(&[3, 4], rng), randn(&[4, 5], rng)], &[0, 1], &|t, v| t.matmul(v[0], v[1]).unwrap());
        gradcheck("matmul_nt", vec![randn(&[3, 4], rng), randn(&[5, 4], rng)], &[0, 1], &|t, v| {
            t.matmul_nt(v[0], v[1]).unwrap()
        });
        gradcheck("transpose", vec![randn(&[3, 4], rng)], &[0], &|t, v| t.transpose(v[0]).unwrap());
        gradcheck("reshape", vec![randn(&[3, 4], rng)], &[0], &|t, v| t.reshape(v[0], vec![2, 6]).unwrap());
    });
}

#[test]
fn elementwise() {
    for_seeds(|rng| {
        let (a, b) = (randn(&[2, 3], rng), randn(&[2, 3], rng));
        let ab = || vec![a.clone(), b.clone()];
        gradcheck("add", ab(), &[0, 1], &|t, v| t.add(v[0], v[1]).unwrap());
        gradcheck("sub", ab(), &[0, 1], &|t, v| t.sub(v[0], v[1]).unwrap());
        gradcheck("mul", ab(), &[0, 1], &|t, v| t.mul(v[0], v[1]).unwrap());
        gradcheck("add_bias", vec![randn(&[4, 3], rng), randn(&[3], rng)], &[0, 1], &|t, v| t.add_bias(v[0], v[1]).unwrap());
        gradcheck("scale", vec![randn(&[5], rng)], &[0], &|t, v| t.scale(v[0], -1.7));
        gradcheck("gelu", vec![randn(&[3, 5], rng)], &[0], &|t, v| t.gelu(v[0]));
        gradcheck("relu", vec![away_from_zero(randn(&[3, 5], rng), 1e-3)], &[0], &|t, v| t.relu(v[0]));
    });
}

#[test]
fn reductions_and_normalization() {
    for_seeds(|rng| {
        gradcheck("sum", vec![randn(&[3, 4], rng)], &[0], &|t, v| t.sum(v[0]));
        gradcheck("mean", vec![randn(&[3, 4], rng)], &[0], &|t, v| t.mean(v[0]));
        gradcheck("sum_squares", vec![randn(&[3, 4], rng)], &[0], &|t, v| t.sum_squares(v[0]));
        gradcheck("softmax", vec![randn(&[3, 6], rng)], &[0], &|t, v| t.softmax(v[0]).unwrap());
        gradcheck("layer_norm", vec![randn(&[3, 6], rng), randn(&[6], rng), randn(&[6], rng)], &[0, 1, 2], &|t, v| {
            t.layer_norm(v[0], v[1], v[2], LN_EPS).unwrap()
        });
    });
}

#[test]
fn indexing_and_concatenation() {
    for_seeds(|rng| {
        gradcheck("select_rows", vec![randn(&[5, 3], rng)], &[0], &|t, v| t.select_rows(v[0], &[4, 0, 4, 2]).unwrap());
        gradcheck("concat_rows", vec![randn(&[2, 3], rng), randn(&[4, 3], rng)], &[0, 1], &|t, v| {
            t.concat_rows(&[v[0], v[1]]).unwrap()
        });
        gradcheck("concat_cols", vec![randn(&[3, 2], rng), randn(&[3, 4], rng)], &[0, 1], &|t, v| {
            t.concat_cols(&[v[0], v[1]]).unwrap()
        });
        gradcheck("slice_cols", vec![randn(&[3, 7], rng)], &[0], &|t, v| t.slice_cols(v[0], 2, 3).unwrap());
    });
}

#[test]
fn rounding_variables() {
    for_seeds(|rng| {
        let alpha = away_from_zero(randn(&[3, 4], rng), 0.05);
        gradcheck("rounding_regularizer", vec![alpha.clone()], &[0], &|t, v| t.rounding_regularizer(v[0], 2.5));
        // Soft rounding is differentiable in alpha; weights and bounds use
        // straight-through rules checked below.
        let w = randn(&[3, 4], rng);
        let lo = Tensor::new(vec![1], vec![-4.0]).unwrap();
        let up = Tensor::new(vec![1], vec![4.0]).unwrap();
        let spec = QuantSpec { bits: 4, granularity: Granularity::PerTensor };
        gradcheck("fake_quant_weight(alpha)", vec![w, lo, up, alpha], &[3], &move |t, v| {
            t.fake_quant_weight(v[0], v[1], v[2], v[3], spec, RoundingMode::Soft).unwrap()
        });
    });
}

/// Smooth stand-in for fake quantization with the rounding residual `delta`
/// frozen: `s * (clip(x/s + delta + z, 0, n) - z)` with a continuous
/// zero-point `z = -low/s`. Its exact gradient is the straight-through
/// clip envelope.
fn envelope(x: &[f64], low: &[f64], up: &[f64], delta: &[f64], bits: u32, channel: impl Fn(usize) -> usize) -> Vec<f64> {
    let n = levels(bits) as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = channel(i);
            let s = (up[c] - low[c]) / n;
            let z = -low[c] / s;
            s * ((v / s + delta[i] + z).clamp(0.0, n) - z)
        })
        .collect()
}

fn residuals(x: &[f64], low: &[f64], up: &[f64], bits: u32, channel: impl Fn(usize) -> usize) -> Vec<f64> {
    let n = levels(bits) as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = channel(i);
            let r = v / ((up[c] - low[c]) / n);
            r.round_ties_even() - r
        })
        .collect()
}

/// Inputs at least a few steps from either clipping edge, so neither the
/// surrogate nor the op changes region under the finite-difference probe.
fn spread(rng: &mut ChaCha8Rng, n: usize, low: f64, up: f64) -> Vec<f64> {
    let step = (up - low) / 15.0;
    (0..n)
        .map(|_| loop {
            let v = rng.random_range(low - 3.0..up + 3.0);
            if (v - low).abs() > 3.0 * step && (v - up).abs() > 3.0 * step {
                break v;
            }
        })
        .collect()
}

fn check_ste(shape: &[usize], low: Vec<f64>, up: Vec<f64>, granularity: Granularity, rng: &mut ChaCha8Rng) {
    let bits = 4;
    let numel: usize = shape.iter().product();
    let channel = |i: usize| granularity.channel_of(shape, i);
    let (lmin, umax) = (low.iter().copied().fold(f64::INFINITY, f64::min), up.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let mut x = spread(rng, numel, lmin, umax);
    // Per-channel ranges differ; keep each element clear of its own edges.
    for (i, v) in x.iter_mut().enumerate() {
        let (l, u) = (low[channel(i)], up[channel(i)]);
        let step = (u - l) / 15.0;
        if (*v - l).abs() <= 3.0 * step || (*v - u).abs() <= 3.0 * step {
            *v = 0.5 * (l + u);
        }
    }
    let delta = residuals(&x, &low, &up, bits, channel);
    let spec = QuantSpec { bits, granularity };

    let tape = Tape::new();
    let xv = tape.param(Tensor::new(shape.to_vec(), x.clone()).unwrap());
    let lv = tape.param(Tensor::new(vec![low.len()], low.clone()).unwrap());
    let uv = tape.param(Tensor::new(vec![up.len()], up.clone()).unwrap());
    let out = tape.fake_quant(xv, lv, uv, spec).unwrap();
    let l = weigh(&tape, out);
    let grads = tape.backward(l).unwrap();

    let weights: Vec<f64> = (0..numel).map(|i| (1.3 * i as f64 + 0.4).sin()).collect();
    let surrogate = |x: &[f64], lo: &[f64], hi: &[f64]| -> f64 {
        envelope(x, lo, hi, &delta, bits, channel).iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let xt = Tensor::new(shape.to_vec(), x.clone()).unwrap();
    let lt = Tensor::new(vec![low.len()], low.clone()).unwrap();
    let ut = Tensor::new(vec![up.len()], up.clone()).unwrap();
    let nx = finite_diff_grad(|t| surrogate(t.data(), &low, &up), &xt, H);
    let nl = finite_diff_grad(|t| surrogate(&x, t.data(), &up), &lt, H);
    let nu = finite_diff_grad(|t| surrogate(&x, &low, t.data()), &ut, H);
    for (name, v, num) in [("x", xv, nx), ("low", lv, nl), ("up", uv, nu)] {
        let err = relative_error(grads.get(v).unwrap(), &num, 1e-6);
        assert!(err <= TOL, "fake_quant {name}: relative error {err:.3e}");
    }
}

#[test]
fn fake_quant_clip_envelope() {
    for_seeds(|rng| {
        let lo = rng.random_range(-3.0..-0.5);
        let up = rng.random_range(0.5..3.0);
        check_ste(&[4, 6], vec![lo], vec![up], Granularity::PerTensor, rng);
        let low: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..-0.5)).collect();
        let up: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..3.0)).collect();
        check_ste(&[4, 3], low, up, Granularity::PerChannel { axis: 1 }, rng);
    });
}

#[test]
fn wrong_gradient_is_detected() {
    // Square with a backward rule missing the factor 2.
    let x = randn(&[4], &mut ChaCha8Rng::seed_from_u64(9));
    let err = max_grad_error(
        &[x],
        &[0],
        &|t, v| {
            let val = t.get(v[0]);
            let sq = Tensor::new(val.shape().to_vec(), val.data().iter().map(|a| a * a).collect()).unwrap();
            Ok(t.custom("bad_square", &[v[0]], sq, |g, ins, _| {
                vec![Some(g.iter().zip(ins[0].data()).map(|(g, a)| g * a).collect())]
            }))
        },
        H,
        1e-6,
    )
    .unwrap();
    assert!(err > 0.3, "{err}");
}
