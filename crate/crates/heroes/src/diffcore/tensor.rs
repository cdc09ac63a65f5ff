//! Dense f64 tensors of rank 1 or 2.
//!
//! The model is small and sessions have variable length, so batching is
//! done by looping over sessions; nothing here needs more than vectors
//! and matrices. Matrices are row-major.

use super::DiffError;

/// A dense, double-precision tensor of rank 1 (vector) or rank 2 (matrix).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Rank-1 tensor from raw values.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major rank-2 tensor. Panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Length-1 vector holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            shape.len() == 1 || shape.len() == 2,
            "only rank-1 and rank-2 tensors are supported, got shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// True for a length-1 vector (the scalar convention used by the tape).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.is_vector()
    }

    /// Rows of a matrix, or the length of a vector.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a matrix. Panics on vectors.
    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "cols() called on a vector");
        self.shape[1]
    }

    /// Value of a length-1 tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() called on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &'static str) -> Result<(), DiffError> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(DiffError::NonFinite { context })
        }
    }
}
