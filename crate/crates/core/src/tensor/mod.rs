//! Dense tensors and reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus row-major `f64` storage. It has
//! no link to any differentiation state, so detached tensors are freely
//! shared and sent across threads. Differentiable computation goes through a
//! [`GradGraph`], a single-threaded tape that records ops and replays them in
//! reverse.

mod graph;
mod grad_check;

pub use grad_check::{grad_check, GradCheckReport};
pub use graph::{GradGraph, Node};

use thiserror::Error;

/// Most-negative finite scalar, used as the masking surrogate for negative
/// infinity. `exp(NEG_LARGE - max)` underflows to exactly 0.0, so masked
/// attention weights are exact zeros without producing NaN during the
/// max-shift.
pub const NEG_LARGE: f64 = f64::MIN;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index range {start}..{end} out of bounds for extent {extent}")]
    BadRange {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("{op}: row index {index} out of bounds for {rows} rows")]
    RowOutOfBounds {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{op}: empty input not allowed")]
    Empty { op: &'static str },
    #[error("mask of shape {mask:?} is not broadcastable to {shape:?}")]
    MaskNotBroadcastable { mask: Vec<usize>, shape: Vec<usize> },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward was already run on this graph")]
    BackwardAlreadyRun,
}

/// Dense row-major tensor of `f64` scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Shape `[1]` tensor holding one scalar.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// n-by-n identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Matrix from explicit rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![n_rows, n_cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![n_rows, n_cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        assert!(self.is_matrix());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert!(self.is_matrix());
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        assert!(self.is_matrix());
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        assert!(self.is_matrix());
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Boolean matrix used for attention masks and `masked_fill`. `true` marks a
/// position as masked (to be replaced / forbidden).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMat {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMat {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: vec![rows, cols],
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn falses(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    /// Build from a predicate over (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut masked: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(masked(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn any_row_fully_masked(&self) -> Option<usize> {
        (0..self.rows).find(|&r| (0..self.cols).all(|c| self.at(r, c)))
    }

    /// Expand (with standard dim-1 broadcasting) to the target matrix shape.
    /// Returns a flat row-major boolean buffer of `rows * cols` entries.
    pub fn broadcast_to(&self, rows: usize, cols: usize) -> Result<Vec<bool>, TensorError> {
        let row_ok = self.rows == rows || self.rows == 1;
        let col_ok = self.cols == cols || self.cols == 1;
        if !row_ok || !col_ok {
            return Err(TensorError::MaskNotBroadcastable {
                mask: vec![self.rows, self.cols],
                shape: vec![rows, cols],
            });
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let sr = if self.rows == 1 { 0 } else { r };
            for c in 0..cols {
                let sc = if self.cols == 1 { 0 } else { c };
                out.push(self.at(sr, sc));
            }
        }
        Ok(out)
    }
}
