//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! The building blocks are deliberately small:
//!
//! * [`Tensor`] — a row-major dense array with an optional gradient slot.
//! * [`Tape`] — an arena of computation nodes. Forward operations append
//!   nodes and return [`TensorId`] handles; [`Tape::backward`] walks the
//!   arena in reverse and accumulates gradients.
//! * [`Adam`] — a name-keyed Adam optimizer with bias correction.
//! * [`gradcheck`] — central finite differences for validating analytic
//!   gradients in tests.
//!
//! Everything is generic over a [`Scalar`] (`f32` or `f64`); `f64` is the
//! default type parameter, so downstream code can use plain `Tensor`/`Tape`.

mod error;
pub mod gradcheck;
mod kernels;
mod optim;
mod scalar;
pub mod seeding;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use tape::{BnStats, Mode, Padding, Tape, TensorId};
pub use tensor::Tensor;

/// Single-precision aliases for callers that trade accuracy for speed.
pub type Tensor32 = Tensor<f32>;
/// See [`Tensor32`].
pub type Tape32 = Tape<f32>;
