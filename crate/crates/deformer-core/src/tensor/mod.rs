//! Minimal dense tensor algebra with reverse-mode differentiation.
//!
//! [`Tensor`] is an immutable row-major array of `f64` scalars. Operations
//! are recorded on a [`Tape`]; calling [`Tape::backward`] walks the tape in
//! reverse and accumulates gradients for every leaf that requires them.
//! Evaluation is single-threaded with a fixed loop order, so identical
//! inputs produce bit-identical outputs across runs.
//!
//! Every primitive adds its cost to a thread-local FLOP counter (see
//! [`flops`]); the metering module relies on those per-op costs matching its
//! analytic formulas exactly.

mod gradcheck;
mod tape;

pub mod flops;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck, GRAD_CHECK_SAMPLE_LIMIT};
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};

/// Scalar precision of a tensor's stored values.
///
/// Data is always held as `f64`; in `F32` mode every primitive rounds its
/// result through `f32` after computing, giving 32-bit semantics without a
/// second storage type. Gradient checking is only meaningful in `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Dense row-major tensor. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    /// Builds a tensor from row-major data. Errors if the shape product does
    /// not match the data length.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data, precision: Precision::F64 })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel], precision: Precision::F64 }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], precision: Precision::F64 }
    }

    /// 2-D constructor, row-major.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self { shape: vec![n], data, precision: Precision::F64 }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Returns a copy tagged with `precision`, rounding stored values when
    /// switching to `F32`.
    pub fn with_precision(&self, precision: Precision) -> Self {
        let mut t = self.clone();
        t.precision = precision;
        if precision == Precision::F32 {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
        t
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.cols();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact bitwise equality of shape and stored values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Mutable view of the backing buffer; the shape is fixed, the values
    /// are the caller's to edit (optimizer updates, perturbation probes).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Applies the tensor's precision mode to freshly computed data.
    pub(crate) fn finish(mut self) -> Self {
        if self.precision == Precision::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, precision }
    }
}
