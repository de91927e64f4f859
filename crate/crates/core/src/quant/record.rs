use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::Scalar;

use super::params::{Granularity, QuantParams};

/// A scalar for per-tensor parameters, an array for per-channel ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<V> {
    One(V),
    Many(Vec<V>),
}

impl<V: Clone> OneOrMany<V> {
    fn from_slice(g: Granularity, v: &[V]) -> Self {
        match g {
            Granularity::PerTensor => OneOrMany::One(v[0].clone()),
            Granularity::PerChannel { .. } => OneOrMany::Many(v.to_vec()),
        }
    }

    pub fn to_vec(&self) -> Vec<V> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Serialized form of one tensor's frozen quantization parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct QuantRecord<T> {
    pub tensor_name: String,
    pub bits: u32,
    pub x_low: OneOrMany<T>,
    pub x_up: OneOrMany<T>,
    pub scale: OneOrMany<T>,
    pub zero_point: OneOrMany<i64>,
    pub granularity: Granularity,
}

impl<T: Scalar> QuantRecord<T> {
    pub fn new(name: &str, qp: &QuantParams<T>) -> Self {
        let g = qp.granularity();
        Self {
            tensor_name: name.to_string(),
            bits: qp.bits(),
            x_low: OneOrMany::from_slice(g, qp.x_low()),
            x_up: OneOrMany::from_slice(g, qp.x_up()),
            scale: OneOrMany::from_slice(g, qp.scale()),
            zero_point: OneOrMany::from_slice(g, qp.zero_point()),
            granularity: g,
        }
    }

    /// Rebuilds parameters from the stored bounds; scale and zero-point are
    /// re-derived, so they always satisfy the affine relation.
    pub fn to_params(&self) -> Result<QuantParams<T>> {
        let bounds: Vec<(T, T)> = self.x_low.to_vec().into_iter().zip(self.x_up.to_vec()).collect();
        QuantParams::from_parts(&bounds, self.bits, self.granularity)
    }
}
