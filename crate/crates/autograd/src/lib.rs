//! Dense `f64` tensors with tape-based reverse-mode differentiation,
//! gradient checkpointing and central-difference gradient checks.

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, Coordinate, FdOptions, FdReport, GradCheckError};
pub use graph::{Gradients, Graph, SegmentFn, Var, CHECK_FINITE_ENV};
pub use tensor::Tensor;
