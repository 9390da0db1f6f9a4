//! Dense float64 tensors, seeded randomness and reverse-mode differentiation.

pub(crate) mod kernels;
mod rng;
mod tape;
mod tensor;

pub use rng::Rng;
pub use tape::{BinaryOp, Gradients, Tape, UnaryOp, Var};
pub use tensor::Tensor;
