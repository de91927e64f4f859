use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::{Scalar, Tensor};

/// Reference maximum for the focus threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaxScope {
    /// Maximum over each head's whole `[Nq × Nk]` slice.
    #[default]
    Global,
    /// Maximum over each query row.
    PerRow,
}

/// Entries of the attention weights above `theta` times the reference maximum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FocusMask {
    /// `[heads × Nq × Nk]`; a 2-D input is a single head.
    pub shape: Vec<usize>,
    pub mask: Vec<bool>,
    pub theta_bits: u64,
    pub scope: MaxScope,
}

impl FocusMask {
    pub fn theta(&self) -> f64 {
        f64::from_bits(self.theta_bits)
    }

    pub fn heads(&self) -> usize {
        self.shape[0]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Range(format!("theta {theta} outside (0, 1)")));
    }
    Ok(())
}

fn as_heads(shape: &[usize]) -> Result<Vec<usize>> {
    match shape.len() {
        2 => Ok(vec![1, shape[0], shape[1]]),
        3 => Ok(shape.to_vec()),
        _ => Err(shape_err!("attention weights of rank {}", shape.len())),
    }
}

pub fn focus_mask<T: Scalar>(a_w: &Tensor<T>, theta: f64) -> Result<FocusMask> {
    focus_mask_scoped(a_w, theta, MaxScope::Global)
}

pub fn focus_mask_scoped<T: Scalar>(a_w: &Tensor<T>, theta: f64, scope: MaxScope) -> Result<FocusMask> {
    check_theta(theta)?;
    let shape = as_heads(a_w.shape())?;
    let (nq, nk) = (shape[1], shape[2]);
    let th = T::lit(theta);
    let mut mask = Vec::with_capacity(a_w.numel());
    let block = match scope {
        MaxScope::Global => nq * nk,
        MaxScope::PerRow => nk,
    };
    if block > 0 {
        for chunk in a_w.data().chunks(block) {
            let m = chunk.iter().copied().fold(T::neg_infinity(), T::max);
            let cut = th * m;
            mask.extend(chunk.iter().map(|&v| v > cut));
        }
    }
    Ok(FocusMask {
        shape,
        mask,
        theta_bits: theta.to_bits(),
        scope,
    })
}

/// Intersection over union per head slice, averaged over heads. Two empty
/// slices count as identical.
pub fn iou_af(a: &FocusMask, b: &FocusMask) -> Result<f64> {
    if a.shape != b.shape {
        return Err(shape_err!("focus masks {:?} vs {:?}", a.shape, b.shape));
    }
    if a.theta_bits != b.theta_bits || a.scope != b.scope {
        return Err(Error::Contract("focus masks built with different thresholds".into()));
    }
    let heads = a.heads();
    if heads == 0 {
        return Err(shape_err!("focus masks without heads"));
    }
    let per = a.mask.len() / heads;
    let mut total = 0.0;
    for (x, y) in a.mask.chunks(per.max(1)).zip(b.mask.chunks(per.max(1))) {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &q) in x.iter().zip(y) {
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / heads as f64)
}

/// `1 - IoU` of the focus masks of two attention-weight tensors.
pub fn dist_pcc<T: Scalar>(a_fp: &Tensor<T>, a_q: &Tensor<T>, theta: f64) -> Result<f64> {
    dist_pcc_scoped(a_fp, a_q, theta, MaxScope::Global)
}

pub fn dist_pcc_scoped<T: Scalar>(a_fp: &Tensor<T>, a_q: &Tensor<T>, theta: f64, scope: MaxScope) -> Result<f64> {
    let m1 = focus_mask_scoped(a_fp, theta, scope)?;
    let m2 = focus_mask_scoped(a_q, theta, scope)?;
    Ok(1.0 - iou_af(&m1, &m2)?)
}
