//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{Grad, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::bernoulli_entropy;
