//! Dense matrices and a small reverse-mode tape.
//!
//! Everything is `f64`. Public operations never hand out non-finite values:
//! tape primitives check their output and fail with [`Error::NonFinite`].
//!
//! [`Error::NonFinite`]: crate::Error::NonFinite

mod matrix;
mod tape;

pub use matrix::{dot, l2_norm, log_sum_exp, softmax_into, Matrix};
pub use tape::{GradTape, Gradients, NodeId, Primitive};
