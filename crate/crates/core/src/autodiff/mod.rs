//! Dense tensors with reverse-mode differentiation.
//!
//! Every op is recorded on a [`Tape`]; [`Tape::backward`] replays the record
//! in reverse. Custom gradient rules go through [`Tape::custom`].

mod adam;
mod gradcheck;
mod ops;
mod tape;

pub use adam::Adam;
pub use gradcheck::{finite_diff_grad, max_grad_error, relative_error};
pub use ops::gelu_scalar;
pub use tape::{BackwardFn, Grads, Tape, Var};
