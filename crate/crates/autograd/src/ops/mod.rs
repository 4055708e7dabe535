//! Differentiable operations, each implemented as methods on [`Tape`](crate::Tape).

pub mod activation;
pub mod conv;
pub mod elementwise;
pub mod reduce;
pub mod softmax;
pub mod spatial;

pub use activation::Activation;
pub use elementwise::BinaryOp;
pub use reduce::Reduction;
