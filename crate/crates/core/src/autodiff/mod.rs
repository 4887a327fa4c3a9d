//! Minimal reverse-mode differentiation over the operations used by the
//! extractors, plus a central-difference gradient checker.
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order, so the
//! node index order is a topological order and [`Graph::backward`] walks it
//! once in reverse. All values are `f64`.

mod gemm;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{BackwardRule, Graph, Var};
pub use params::{BoundParams, Parameter, ParameterSet};
pub use tensor::Tensor;
