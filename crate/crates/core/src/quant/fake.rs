//! Simulated quantization, on plain tensors and as tape ops with
//! straight-through gradients.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::{Scalar, Tensor};

use super::params::{levels, quantize_scalar, Granularity, QuantParams};
use super::rounding::{hard_offset, soft_offset, soft_offset_grad, RoundingMode, RoundingVars};

/// Bit-width and channel layout of a fake-quant op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: u32,
    pub granularity: Granularity,
}

impl<T: Scalar> From<&QuantParams<T>> for QuantSpec {
    fn from(p: &QuantParams<T>) -> Self {
        Self {
            bits: p.bits(),
            granularity: p.granularity(),
        }
    }
}

/// `dequantize(quantize(x))`.
pub fn fake_quant<T: Scalar>(x: &Tensor<T>, qp: &QuantParams<T>) -> Result<Tensor<T>> {
    qp.check_shape(x.shape())?;
    let n = qp.levels();
    let g = qp.granularity();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = g.channel_of(x.shape(), i);
            qp.dequant_code(c, quantize_scalar(v, qp.scale()[c], qp.zero_point()[c], n))
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Weight fake-quant with learned rounding:
/// `s * (clip(floor(w / s) + h(alpha) + z, 0, 2^b - 1) - z)`.
pub fn fake_quant_weight<T: Scalar>(
    w: &Tensor<T>,
    qp: &QuantParams<T>,
    rv: &RoundingVars<T>,
    mode: RoundingMode,
) -> Result<Tensor<T>> {
    qp.check_shape(w.shape())?;
    if rv.alpha.shape() != w.shape() {
        return Err(shape_err!(
            "rounding variables {:?} for weight {:?}",
            rv.alpha.shape(),
            w.shape()
        ));
    }
    let n = T::lit(qp.levels() as f64);
    let g = qp.granularity();
    let data = w
        .data()
        .iter()
        .zip(rv.alpha.data())
        .enumerate()
        .map(|(i, (&v, &a))| {
            let c = g.channel_of(w.shape(), i);
            let s = qp.scale()[c];
            let z = T::lit(qp.zero_point()[c] as f64);
            let h = match mode {
                RoundingMode::Soft => soft_offset(a),
                RoundingMode::Hard => hard_offset(a),
            };
            let q = ((v / s).floor() + h + z).max(T::zero()).min(n);
            s * (q - z)
        })
        .collect();
    Ok(Tensor::from_parts(w.shape().to_vec(), data))
}

/// With probability `p` an element passes through unquantized.
pub fn qdrop_fake_quant<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    qp: &QuantParams<T>,
    p: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let q = fake_quant(x, qp)?;
    let data = x
        .data()
        .iter()
        .zip(q.data())
        .map(|(&orig, &fq)| if rng.random::<f64>() < p { orig } else { fq })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Scale and (clamped) zero-point computed from possibly-learned bounds.
#[derive(Clone, Copy)]
struct Affine<T> {
    s: T,
    z: T,
}

fn affines<T: Scalar>(low: &[T], up: &[T], bits: u32) -> Vec<Affine<T>> {
    let n = T::lit(levels(bits) as f64);
    low.iter()
        .zip(up)
        .map(|(&lo, &hi)| {
            let floor = T::lit(1e-12) * T::one().max(lo.abs());
            let s = ((hi - lo) / n).max(floor);
            let z = (-lo / s).round_half_even().max(T::zero()).min(n);
            Affine { s, z }
        })
        .collect()
}

/// Where a fake-quant input landed relative to the representable range.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Region {
    Below,
    Inside,
    Above,
}

fn check_bounds_shape<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    low: Var,
    up: Var,
    spec: QuantSpec,
) -> Result<(Vec<usize>, usize)> {
    let shape = tape.shape(x);
    let c = spec.granularity.channels(&shape)?;
    let (nl, nu) = (tape.value(low).numel(), tape.value(up).numel());
    if nl != c || nu != c {
        return Err(shape_err!("bounds of {nl}/{nu} entries for {c} channels of {:?}", shape));
    }
    Ok((shape, c))
}

impl<T: Scalar> Tape<T> {
    /// Fake quantization with learnable bounds `low`/`up` (one entry per
    /// channel).
    ///
    /// Backward: `x` receives the upstream gradient inside
    /// `[dequant(0), dequant(2^b - 1)]` and zero outside. Saturated elements
    /// send their gradient to the bound they saturate at; inside elements
    /// contribute the rounding residual `(round(v) - v) / (2^b - 1)` to `up`
    /// and its negation to `low`.
    pub fn fake_quant(&self, x: Var, low: Var, up: Var, spec: QuantSpec) -> Result<Var> {
        self.fake_quant_masked(x, low, up, spec, None)
    }

    /// Fake quantization where `keep[i] == true` passes element `i` through
    /// untouched (QDrop).
    pub fn qdrop_fake_quant<R: Rng + ?Sized>(
        &self,
        x: Var,
        low: Var,
        up: Var,
        spec: QuantSpec,
        p: f64,
        rng: &mut R,
    ) -> Result<Var> {
        if p <= 0.0 {
            return self.fake_quant(x, low, up, spec);
        }
        let n = self.value(x).numel();
        let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < p).collect();
        self.fake_quant_masked(x, low, up, spec, Some(keep))
    }

    fn fake_quant_masked(
        &self,
        x: Var,
        low: Var,
        up: Var,
        spec: QuantSpec,
        keep: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (shape, _) = check_bounds_shape(self, x, low, up, spec)?;
        let n = T::lit(levels(spec.bits) as f64);
        let g = spec.granularity;
        let (value, regions, resid) = {
            let (xv, lv, uv) = (self.value(x), self.value(low), self.value(up));
            let aff = affines(lv.data(), uv.data(), spec.bits);
            let mut out = Vec::with_capacity(xv.numel());
            let mut regions = Vec::with_capacity(xv.numel());
            let mut resid = Vec::with_capacity(xv.numel());
            for (i, &v) in xv.data().iter().enumerate() {
                if keep.as_ref().is_some_and(|k| k[i]) {
                    out.push(v);
                    regions.push(None);
                    resid.push(T::zero());
                    continue;
                }
                let a = aff[g.channel_of(&shape, i)];
                let ratio = v / a.s;
                let k = ratio.max(-a.z - T::one()).min(n - a.z + T::one()).round_half_even_small();
                let q = (k + a.z).max(T::zero()).min(n);
                out.push(a.s * (q - a.z));
                let (lo_edge, hi_edge) = (-a.s * a.z, a.s * (n - a.z));
                let r = if v < lo_edge {
                    Region::Below
                } else if v > hi_edge {
                    Region::Above
                } else {
                    Region::Inside
                };
                regions.push(Some(r));
                resid.push((k - ratio) / n);
            }
            (Tensor::from_parts(shape.clone(), out), regions, resid)
        };
        Ok(self.record("fake_quant", &[x, low, up], value, move |gr, ins, _| {
            let c = ins[1].numel();
            let mut dx = vec![T::zero(); gr.len()];
            let mut dlow = vec![T::zero(); c];
            let mut dup = vec![T::zero(); c];
            for (i, &gv) in gr.iter().enumerate() {
                let ch = g.channel_of(&shape, i);
                match regions[i] {
                    None => dx[i] = gv,
                    Some(Region::Inside) => {
                        dx[i] = gv;
                        dup[ch] += gv * resid[i];
                        dlow[ch] -= gv * resid[i];
                    }
                    Some(Region::Below) => dlow[ch] += gv,
                    Some(Region::Above) => dup[ch] += gv,
                }
            }
            vec![Some(dx), Some(dlow), Some(dup)]
        }))
    }

    /// Weight fake-quant with rounding variables `alpha` (same shape as `w`).
    /// Differentiable in `alpha` through the rectified sigmoid in soft mode.
    pub fn fake_quant_weight(
        &self,
        w: Var,
        low: Var,
        up: Var,
        alpha: Var,
        spec: QuantSpec,
        mode: RoundingMode,
    ) -> Result<Var> {
        let (shape, _) = check_bounds_shape(self, w, low, up, spec)?;
        if self.shape(alpha) != shape {
            return Err(shape_err!("rounding variables {:?} for weight {:?}", self.shape(alpha), shape));
        }
        let n = T::lit(levels(spec.bits) as f64);
        let g = spec.granularity;
        let (value, regions, resid, dh) = {
            let (wv, lv, uv, av) = (self.value(w), self.value(low), self.value(up), self.value(alpha));
            let aff = affines(lv.data(), uv.data(), spec.bits);
            let len = wv.numel();
            let mut out = Vec::with_capacity(len);
            let mut regions = Vec::with_capacity(len);
            let mut resid = Vec::with_capacity(len);
            let mut dh = Vec::with_capacity(len);
            for (i, (&v, &a)) in wv.data().iter().zip(av.data()).enumerate() {
                let af = aff[g.channel_of(&shape, i)];
                let ratio = v / af.s;
                let h = match mode {
                    RoundingMode::Soft => soft_offset(a),
                    RoundingMode::Hard => hard_offset(a),
                };
                let k = ratio.floor() + h;
                let raw = k + af.z;
                let q = raw.max(T::zero()).min(n);
                out.push(af.s * (q - af.z));
                let r = if raw < T::zero() {
                    Region::Below
                } else if raw > n {
                    Region::Above
                } else {
                    Region::Inside
                };
                regions.push(r);
                resid.push((k - ratio) / n);
                dh.push(match mode {
                    RoundingMode::Soft => af.s * soft_offset_grad(a),
                    RoundingMode::Hard => T::zero(),
                });
            }
            (Tensor::from_parts(shape.clone(), out), regions, resid, dh)
        };
        Ok(self.record("fake_quant_weight", &[w, low, up, alpha], value, move |gr, ins, _| {
            let c = ins[1].numel();
            let mut dw = vec![T::zero(); gr.len()];
            let mut dlow = vec![T::zero(); c];
            let mut dup = vec![T::zero(); c];
            let mut dalpha = vec![T::zero(); gr.len()];
            for (i, &gv) in gr.iter().enumerate() {
                let ch = g.channel_of(&shape, i);
                match regions[i] {
                    Region::Inside => {
                        dw[i] = gv;
                        dup[ch] += gv * resid[i];
                        dlow[ch] -= gv * resid[i];
                        dalpha[i] = gv * dh[i];
                    }
                    Region::Below => dlow[ch] += gv,
                    Region::Above => dup[ch] += gv,
                }
            }
            vec![Some(dw), Some(dlow), Some(dup), Some(dalpha)]
        }))
    }

    /// `sum(1 - |2 h(alpha) - 1|^beta)`; pushes rounding offsets to {0, 1}.
    pub fn rounding_regularizer(&self, alpha: Var, beta: T) -> Var {
        let s: T = self
            .value(alpha)
            .data()
            .iter()
            .map(|&a| T::one() - (T::lit(2.0) * soft_offset(a) - T::one()).abs().powf(beta))
            .sum();
        self.record("rounding_regularizer", &[alpha], Tensor::scalar(s), move |g, ins, _| {
            let two = T::lit(2.0);
            let d = ins[0]
                .data()
                .iter()
                .map(|&a| {
                    let u = two * soft_offset(a) - T::one();
                    if u == T::zero() {
                        return T::zero();
                    }
                    let du = -beta * u.abs().powf(beta - T::one()) * u.signum();
                    g[0] * du * two * soft_offset_grad(a)
                })
                .collect();
            vec![Some(d)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::params_from_bounds;

    #[test]
    fn tape_op_matches_plain_fake_quant() {
        let qp = params_from_bounds(-1.3f64, 2.1, 5).unwrap();
        let x = Tensor::from_f64(&[2, 4], &[-3.0, -1.0, -0.2, 0.0, 0.37, 1.1, 2.0, 5.0]).unwrap();
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let lo = tape.constant(Tensor::scalar(-1.3));
        let hi = tape.constant(Tensor::scalar(2.1));
        let y = tape.fake_quant(xv, lo, hi, (&qp).into()).unwrap();
        assert_eq!(tape.get(y), fake_quant(&x, &qp).unwrap());
    }

    #[test]
    fn ste_passes_gradient_only_inside_range() {
        let qp = params_from_bounds(-1.0f64, 1.0, 4).unwrap();
        let (lo_edge, hi_edge) = qp.representable(0);
        let x = Tensor::from_f64(&[4], &[lo_edge - 0.01, 0.1, 0.9, hi_edge + 0.01]).unwrap();
        let tape = Tape::<f64>::new();
        let xv = tape.param(x);
        let lo = tape.param(Tensor::scalar(-1.0));
        let hi = tape.param(Tensor::scalar(1.0));
        let y = tape.fake_quant(xv, lo, hi, (&qp).into()).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        // one element saturates at each side
        let (dl, du) = (g.get(lo).unwrap().data()[0], g.get(hi).unwrap().data()[0]);
        assert!((dl - 1.0).abs() < 0.2, "dlow {dl}");
        assert!((du - 1.0).abs() < 0.2, "dup {du}");
    }

    #[test]
    fn per_channel_bounds_shape_checked() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let lo = tape.constant(Tensor::full(&[3], -1.0));
        let hi = tape.constant(Tensor::full(&[3], 1.0));
        let spec = QuantSpec {
            bits: 4,
            granularity: Granularity::PerChannel { axis: 1 },
        };
        assert!(tape.fake_quant(x, lo, hi, spec).is_err());
    }
}
