//! Hilbert-scanned selective state-space detector with hybrid
//! spatial-frequency attention, built on a small reverse-mode tape.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod autodiff;
pub mod checkpoint;
pub mod detect;
pub mod error;
pub mod eval;
pub mod freq;
pub mod gradcheck;
pub mod hilbert;
pub mod hsfa;
pub mod kernels;
pub mod nn;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod vssm;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use kernels::ConvGeom;
pub use scalar::Scalar;
pub use tensor::{Shape4, Tensor4};

/// Double-precision tensor, used by every gradient and oracle check.
pub type Tensor = Tensor4<f64>;
/// Single-precision tensor.
pub type Tensor32 = Tensor4<f32>;
