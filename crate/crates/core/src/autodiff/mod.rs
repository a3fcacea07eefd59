//! Minimal reverse-mode automatic differentiation over `f64` tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
