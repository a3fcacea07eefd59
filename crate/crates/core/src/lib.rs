//! Class-incremental learning with exponentially averaged, class-wise
//! feature significance.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small define-by-run tape over `f64` tensors.
//! - [`network`]: convolutional stages, a dense embedder and a growing
//!   cosine classifier.
//! - [`significance`]: per-class feature significance from per-sample loss
//!   gradients, normalised across classes and aged by exponential averaging.
//! - [`distillation`]: the significance-weighted feature distillation loss.
//! - [`exemplar`]: fixed-budget exemplar memory.
//! - [`harness`]: task streams, training, evaluation, ablations and reports.

// `!(x > 0.0)` guards also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod container;
pub mod diagnostics;
pub mod distillation;
mod error;
pub mod exemplar;
pub mod harness;
pub mod network;
pub mod rng;
pub mod significance;

pub use error::{Error, Result};

/// Index of a class in task-arrival order (`0..r^t`).
pub type ClassId = usize;
