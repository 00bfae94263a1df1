//! Sequence-level optimal transport alignment for knowledge distillation
//! between models whose tokenizers disagree.
//!
//! The pieces build on each other:
//!
//! - [`numerics`]: dense matrices, stable softmax and log-sum-exp.
//! - [`ot`]: empirical measures, log-domain Sinkhorn, and exact oracles.
//! - [`cost`]: cross-attention cost `1 - softmax(X (Y P)^T / sqrt(d))`.
//! - [`align`]: OT alignment losses over embedding and last-hidden layers,
//!   with frozen-plan gradients.
//! - [`objective`]: cross chain-of-thought losses and the combined
//!   distillation objective.
//! - [`toy`]: a small end-to-end distillation harness with two mismatched
//!   tokenizers.
//! - [`io`]: JSON file formats and run configuration shared by the CLI.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod cost;
mod error;
pub mod io;
pub mod numerics;
pub mod objective;
pub mod ot;
pub mod toy;

pub use error::{Error, Result};
pub use numerics::Matrix;
