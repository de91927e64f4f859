//! Learned rounding offsets (rectified sigmoid with annealed polarization
//! regularizer).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::{Scalar, Tensor};

use super::params::QuantParams;

/// Stretch parameters of the rectified sigmoid.
const ZETA: f64 = 1.1;
const GAMMA: f64 = -0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingMode {
    /// Continuous offset in `[0, 1]`, used while learning.
    #[default]
    Soft,
    /// Offset snapped to `{0, 1}`, used at inference.
    Hard,
}

/// Per-element rounding variables of one weight tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RoundingVars<T> {
    pub alpha: Tensor<T>,
}

#[inline]
fn sigmoid<T: Scalar>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}

/// `clamp(sigmoid(a) * (zeta - gamma) + gamma, 0, 1)`
#[inline]
pub fn soft_offset<T: Scalar>(a: T) -> T {
    (sigmoid(a) * T::lit(ZETA - GAMMA) + T::lit(GAMMA)).max(T::zero()).min(T::one())
}

#[inline]
pub fn hard_offset<T: Scalar>(a: T) -> T {
    if a >= T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// Derivative of [`soft_offset`]; zero where the clamp is active.
#[inline]
pub fn soft_offset_grad<T: Scalar>(a: T) -> T {
    let sg = sigmoid(a);
    let raw = sg * T::lit(ZETA - GAMMA) + T::lit(GAMMA);
    if raw <= T::zero() || raw >= T::one() {
        T::zero()
    } else {
        sg * (T::one() - sg) * T::lit(ZETA - GAMMA)
    }
}

impl<T: Scalar> RoundingVars<T> {
    /// Initializes so the soft offset equals the fractional part of `w / s`,
    /// reproducing `w / s` exactly before clipping.
    pub fn init(w: &Tensor<T>, qp: &QuantParams<T>) -> Result<Self> {
        qp.check_shape(w.shape())?;
        let g = qp.granularity();
        let lo = T::lit(1e-6);
        let alpha = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let r = v / qp.scale()[g.channel_of(w.shape(), i)];
                let frac = r - r.floor();
                let p = ((frac - T::lit(GAMMA)) / T::lit(ZETA - GAMMA)).max(lo).min(T::one() - lo);
                (p / (T::one() - p)).ln()
            })
            .collect();
        Ok(Self {
            alpha: Tensor::new(w.shape().to_vec(), alpha)?,
        })
    }

    pub fn offsets(&self, mode: RoundingMode) -> Vec<T> {
        self.alpha
            .data()
            .iter()
            .map(|&a| match mode {
                RoundingMode::Soft => soft_offset(a),
                RoundingMode::Hard => hard_offset(a),
            })
            .collect()
    }

    /// Fraction of soft offsets within `tol` of 0 or 1.
    pub fn polarized_fraction(&self, tol: T) -> f64 {
        let offs = self.offsets(RoundingMode::Soft);
        let hits = offs.iter().filter(|&&h| h <= tol || h >= T::one() - tol).count();
        hits as f64 / offs.len().max(1) as f64
    }
}

/// Value of `sum(1 - |2 h - 1|^beta)`.
pub fn rounding_regularizer<T: Scalar>(rv: &RoundingVars<T>, beta: T) -> T {
    rv.offsets(RoundingMode::Soft)
        .into_iter()
        .map(|h| T::one() - (T::lit(2.0) * h - T::one()).abs().powf(beta))
        .sum()
}

/// Exponent schedule: held at `start` through the warm-up fraction, then
/// decays linearly to `end`.
pub fn anneal_beta(progress: f64, warmup: f64, start: f64, end: f64) -> f64 {
    if progress <= warmup {
        return start;
    }
    let t = ((progress - warmup) / (1.0 - warmup).max(1e-12)).clamp(0.0, 1.0);
    start + (end - start) * t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{fake_quant, fake_quant_weight, params_from_bounds};

    #[test]
    fn soft_init_reproduces_weight() {
        let qp = params_from_bounds(-1.0f64, 1.0, 4).unwrap();
        let w = Tensor::from_f64(&[5], &[-0.93, -0.2, 0.0, 0.41, 0.77]).unwrap();
        let rv = RoundingVars::init(&w, &qp).unwrap();
        let wq = fake_quant_weight(&w, &qp, &rv, RoundingMode::Soft).unwrap();
        assert!(wq.max_abs_diff(&w) < 1e-5);
    }

    #[test]
    fn hard_init_matches_nearest_rounding() {
        let qp = params_from_bounds(-1.0f64, 1.0, 4).unwrap();
        let w = Tensor::from_f64(&[6], &[-0.93, -0.21, 0.04, 0.41, 0.77, 0.99]).unwrap();
        let rv = RoundingVars::init(&w, &qp).unwrap();
        let hard = fake_quant_weight(&w, &qp, &rv, RoundingMode::Hard).unwrap();
        assert_eq!(hard, fake_quant(&w, &qp).unwrap());
    }

    #[test]
    fn offsets_bounded() {
        for a in [-50.0f64, -3.0, -0.1, 0.0, 0.2, 4.0, 60.0] {
            let h = soft_offset(a);
            assert!((0.0..=1.0).contains(&h));
        }
    }

    #[test]
    fn beta_schedule_endpoints() {
        assert_eq!(anneal_beta(0.0, 0.2, 20.0, 2.0), 20.0);
        assert_eq!(anneal_beta(0.2, 0.2, 20.0, 2.0), 20.0);
        assert!((anneal_beta(1.0, 0.2, 20.0, 2.0) - 2.0).abs() < 1e-12);
    }
}
