//! Deep vision transformers with re-attention, its baselines, and the
//! attention-collapse diagnostics used to compare them.

// `!(x >= 0.0)` is used on purpose to reject NaN alongside negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod attention;
pub mod diagnostics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
