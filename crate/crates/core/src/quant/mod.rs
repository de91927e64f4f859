//! Uniform affine fake quantization.

mod fake;
pub(crate) mod params;
mod record;
mod rounding;

pub use fake::{fake_quant, fake_quant_weight, qdrop_fake_quant, QuantSpec};
pub use params::{
    affine_from_bounds, dequantize, levels, params_from_bounds, per_channel_bounds, quantize,
    symmetric_bounds, Granularity, QTensor, QuantParams, MAX_BITS, MIN_BITS,
};
pub use record::{OneOrMany, QuantRecord};
pub use rounding::{
    anneal_beta, hard_offset, rounding_regularizer, soft_offset, RoundingMode, RoundingVars,
};
