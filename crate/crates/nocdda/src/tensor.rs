//! Dense tensors: flat 64-bit storage with row-major shape metadata.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense tensor of `f64` values in row-major order.
///
/// Invariants enforced at construction: the shape product equals the value
/// count, no dimension is zero, and every value is finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidShape {
                context: "Tensor::new",
                reason: format!("shape {shape:?} has an empty or zero dimension"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: numel,
                got: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Tensor { shape, values })
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::new(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Validates the finite-values invariant after in-place mutation.
    pub(crate) fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }
}

/// y = W x for a row-major `rows x cols` matrix.
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x.iter()) {
            acc += a * b;
        }
        out[r] = acc;
    }
}

/// y = Wᵀ x, accumulating into `out`.
pub(crate) fn matvec_transpose_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let xr = x[r];
        for (o, a) in out.iter_mut().zip(row.iter()) {
            *o += xr * a;
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub(crate) fn softmax(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits.iter()) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
