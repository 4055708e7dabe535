//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations define-by-run; [`Tape::backward`] sweeps it
//! in reverse and returns leaf gradients. Models keep their weights in a
//! [`ParamSet`], bind them onto a fresh tape for every forward pass, and
//! update them with [`Adam`].

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod param;
mod real;
pub mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Error, Result};
pub use ops::{Activation, BinaryOp, Reduction};
pub use param::{kaiming_kernel, Bound, ParamId, ParamSet, Parameter};
pub use real::Real;
pub use tape::{Backward, FaultInjection, Gradients, Tape, Var};
pub use tensor::Tensor;
