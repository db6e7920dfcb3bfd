//! Dense tensors, a per-pass differentiation tape, and gradient verification.

pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Precision, Tensor};

#[cfg(test)]
mod prop_tests;
