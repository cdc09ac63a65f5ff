//! Minimal reverse-mode automatic differentiation over dense real vectors
//! and matrices: enough primitives to express and train the recurrent
//! ranking model, plus a finite-difference gradient checker.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{check_unary_primitive, gradient_check, GradCheckReport};
pub use params::{Binding, ParamId, ParamSet, Parameter};
pub use tape::{scaled_softplus, sigmoid, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Failures raised by tape primitives and the gradient checker.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: &'static str },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("non-finite loss while perturbing parameter '{param}' entry {entry}")]
    NonFinitePerturbed { param: String, entry: usize },
}
