//! Dense tensors, a differentiation tape, and Adam.
//!
//! Only the primitives the alignment, routing and baseline models need are
//! provided: convolutions, 2-D layer norm, channel gating, linear layers and a
//! handful of elementwise ops and losses.

pub mod check;
mod error;
mod kernels;
mod optim;
mod param;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::Adam;
pub use param::{Module, ParamId, Parameter};
pub use rng::{derive_seed, Rng};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var, DICE_SMOOTH};
pub use tensor::Tensor;

/// Logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    tape::sigmoid(x)
}
