use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::{Scalar, Tensor};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

impl Granularity {
    /// Channel of the element at flat `index` in a tensor of `shape`.
    #[inline]
    pub fn channel_of(self, shape: &[usize], index: usize) -> usize {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerChannel { axis } => {
                let inner: usize = shape[axis + 1..].iter().product();
                (index / inner) % shape[axis]
            }
        }
    }

    pub fn channels(self, shape: &[usize]) -> Result<usize> {
        match self {
            Granularity::PerTensor => Ok(1),
            Granularity::PerChannel { axis } => shape
                .get(axis)
                .copied()
                .ok_or_else(|| shape_err!("channel axis {axis} on shape {:?}", shape)),
        }
    }
}

/// Bit-width plus clipping range and the scale/zero-point it induces.
///
/// `s = (x_up - x_low) / (2^b - 1)` and `z = round(-x_low / s)` hold for every
/// channel; `z` rounds half-to-even and is clamped into `[0, 2^b - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams<T> {
    bits: u32,
    granularity: Granularity,
    x_low: Vec<T>,
    x_up: Vec<T>,
    scale: Vec<T>,
    zero_point: Vec<i64>,
    pub learnable: bool,
}

pub fn levels(bits: u32) -> i64 {
    (1i64 << bits) - 1
}

fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Range(format!("bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]")));
    }
    Ok(())
}

/// Scale and zero-point for one clipping range. The flag reports whether the
/// zero-point had to be clamped.
pub fn affine_from_bounds<T: Scalar>(x_low: T, x_up: T, bits: u32) -> Result<(T, i64, bool)> {
    check_bits(bits)?;
    if !(x_low.is_finite() && x_up.is_finite()) || x_up <= x_low {
        return Err(Error::Range(format!("degenerate clipping range [{x_low}, {x_up}]")));
    }
    let n = levels(bits);
    let s = (x_up - x_low) / T::lit(n as f64);
    if s <= T::zero() {
        return Err(Error::Range(format!("range [{x_low}, {x_up}] underflows the scale")));
    }
    let z = (-x_low / s).round_half_even().as_f64() as i64;
    let zc = z.clamp(0, n);
    Ok((s, zc, zc != z))
}

/// Per-tensor parameters from a clipping range.
pub fn params_from_bounds<T: Scalar>(x_low: T, x_up: T, bits: u32) -> Result<QuantParams<T>> {
    QuantParams::per_tensor(x_low, x_up, bits)
}

impl<T: Scalar> QuantParams<T> {
    pub fn per_tensor(x_low: T, x_up: T, bits: u32) -> Result<Self> {
        Self::build(&[(x_low, x_up)], bits, Granularity::PerTensor)
    }

    pub fn per_channel(bounds: &[(T, T)], bits: u32, axis: usize) -> Result<Self> {
        if bounds.is_empty() {
            return Err(shape_err!("per-channel parameters need at least one channel"));
        }
        Self::build(bounds, bits, Granularity::PerChannel { axis })
    }

    pub fn from_parts(bounds: &[(T, T)], bits: u32, granularity: Granularity) -> Result<Self> {
        match granularity {
            Granularity::PerTensor if bounds.len() != 1 => {
                Err(shape_err!("per-tensor parameters with {} ranges", bounds.len()))
            }
            _ => Self::build(bounds, bits, granularity),
        }
    }

    fn build(bounds: &[(T, T)], bits: u32, granularity: Granularity) -> Result<Self> {
        let mut p = Self {
            bits,
            granularity,
            x_low: Vec::with_capacity(bounds.len()),
            x_up: Vec::with_capacity(bounds.len()),
            scale: Vec::with_capacity(bounds.len()),
            zero_point: Vec::with_capacity(bounds.len()),
            learnable: false,
        };
        for (c, &(lo, up)) in bounds.iter().enumerate() {
            let (s, z, clamped) = affine_from_bounds(lo, up, bits)?;
            if clamped {
                warn!("zero-point clamped for channel {c}: range [{lo}, {up}] excludes zero");
            }
            p.x_low.push(lo);
            p.x_up.push(up);
            p.scale.push(s);
            p.zero_point.push(z);
        }
        Ok(p)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn levels(&self) -> i64 {
        levels(self.bits)
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn x_low(&self) -> &[T] {
        &self.x_low
    }

    pub fn x_up(&self) -> &[T] {
        &self.x_up
    }

    pub fn scale(&self) -> &[T] {
        &self.scale
    }

    pub fn zero_point(&self) -> &[i64] {
        &self.zero_point
    }

    pub fn bounds(&self) -> Vec<(T, T)> {
        self.x_low.iter().copied().zip(self.x_up.iter().copied()).collect()
    }

    /// Dequantized value of integer code `q` in channel `c`.
    #[inline]
    pub fn dequant_code(&self, c: usize, q: i64) -> T {
        self.scale[c] * T::lit((q - self.zero_point[c]) as f64)
    }

    /// `[dequant(0), dequant(2^b - 1)]` for channel `c`.
    pub fn representable(&self, c: usize) -> (T, T) {
        (self.dequant_code(c, 0), self.dequant_code(c, self.levels()))
    }

    pub(crate) fn check_shape(&self, shape: &[usize]) -> Result<()> {
        let c = self.granularity.channels(shape)?;
        if c != self.channels() {
            return Err(shape_err!(
                "{} quantization channels for tensor of shape {:?}",
                self.channels(),
                shape
            ));
        }
        Ok(())
    }
}

/// Integer codes with the shape of the source tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i64>,
}

/// `clip(round(ratio) + z, 0, n)` as a float code. The ratio is clamped
/// before rounding, which leaves the result unchanged.
#[inline]
pub(crate) fn code<T: Scalar>(ratio: T, z: T, n: T) -> T {
    let r = ratio.max(-z - T::one()).min(n - z + T::one());
    (r.round_half_even_small() + z).max(T::zero()).min(n)
}

#[inline]
pub(crate) fn quantize_scalar<T: Scalar>(x: T, s: T, z: i64, n: i64) -> i64 {
    code(x / s, T::lit(z as f64), T::lit(n as f64)).as_f64() as i64
}

/// `clip(round(x / s) + z, 0, 2^b - 1)` elementwise.
pub fn quantize<T: Scalar>(x: &Tensor<T>, qp: &QuantParams<T>) -> Result<QTensor> {
    qp.check_shape(x.shape())?;
    let n = qp.levels();
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = qp.granularity.channel_of(x.shape(), i);
            quantize_scalar(v, qp.scale[c], qp.zero_point[c], n)
        })
        .collect();
    Ok(QTensor {
        shape: x.shape().to_vec(),
        codes,
    })
}

/// `s * (x_q - z)` elementwise.
pub fn dequantize<T: Scalar>(xq: &QTensor, qp: &QuantParams<T>) -> Result<Tensor<T>> {
    qp.check_shape(&xq.shape)?;
    let data = xq
        .codes
        .iter()
        .enumerate()
        .map(|(i, &q)| qp.dequant_code(qp.granularity.channel_of(&xq.shape, i), q))
        .collect();
    Tensor::new(xq.shape.clone(), data)
}

/// Per-output-channel `(min, max)` of a weight along `axis`.
pub fn per_channel_bounds<T: Scalar>(w: &Tensor<T>, axis: usize) -> Result<Vec<(T, T)>> {
    let g = Granularity::PerChannel { axis };
    let c = g.channels(w.shape())?;
    let mut out = vec![(T::infinity(), T::neg_infinity()); c];
    for (i, &v) in w.data().iter().enumerate() {
        let ch = g.channel_of(w.shape(), i);
        out[ch].0 = out[ch].0.min(v);
        out[ch].1 = out[ch].1.max(v);
    }
    Ok(out)
}

/// Widens `[lo, up]` to the symmetric range `[-m, m]`, `m = max(|lo|, |up|)`.
pub fn symmetric_bounds<T: Scalar>(lo: T, up: T) -> (T, T) {
    let m = lo.abs().max(up.abs());
    (-m, m)
}
