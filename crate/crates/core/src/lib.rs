//! Post-training fake quantization of a miniature promptable segmenter.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root pin the 64-bit instantiation used by the
//! experiment harness.

pub mod autodiff;
pub mod calib;
mod error;
pub mod kernels;
pub mod model;
pub mod quant;
pub mod recon;
pub mod rng;
mod scalar;
mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type QuantParams64 = quant::QuantParams<f64>;
pub type Model64 = model::Model<f64>;
pub type QuantEnv64 = model::QuantEnv<f64>;
