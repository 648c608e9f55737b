//! Reverse-mode automatic differentiation over dense 2-D `f64` tensors.
//!
//! A [`Tensor`] is a shared handle to a row-major value buffer plus an
//! optional gradient buffer. Differentiable computation is recorded on a
//! [`Tape`] (define-by-run: a fresh tape per forward pass); calling
//! [`Tape::backward`] walks the recorded nodes in reverse and accumulates
//! `d loss / d tensor` additively into every `requires_grad` tensor
//! reachable from the loss.
//!
//! Leaf tensors (parameters, inputs) may be reused across tapes; tensors
//! produced by a tape op belong to that tape and are rejected as operands
//! anywhere else.

mod gradcheck;
mod tape;
#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, DEFAULT_GRAD_CHECK_EPS};
pub use tape::{Tape, PROB_CLAMP};

use std::cell::RefCell;
use std::rc::Rc;

use crate::{Error, Result};

pub(crate) struct TensorData {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) values: Vec<f64>,
    /// Present iff the tensor requires gradients.
    pub(crate) grad: Option<Vec<f64>>,
    /// Generation of the tape whose op produced this tensor (None for leaves).
    pub(crate) origin: Option<u64>,
    /// Most recent registration on a tape: (tape generation, node index).
    pub(crate) slot: Option<(u64, usize)>,
}

/// Dense 2-D 64-bit tensor participating in a differentiation tape.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<TensorData>>,
}

impl Tensor {
    fn from_data(rows: usize, cols: usize, values: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            values.len(),
            rows * cols,
            "value buffer length {} does not match shape {rows}x{cols}",
            values.len()
        );
        let grad = requires_grad.then(|| vec![0.0; rows * cols]);
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                rows,
                cols,
                values,
                grad,
                origin: None,
                slot: None,
            })),
        }
    }

    /// Constant leaf tensor (no gradient tracking).
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        Tensor::from_data(rows, cols, values, false)
    }

    /// Trainable leaf tensor; `backward` accumulates into its gradient.
    pub fn param(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        Tensor::from_data(rows, cols, values, true)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Tensor {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows in from_rows");
            values.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, values)
    }

    pub(crate) fn op_output(rows: usize, cols: usize, values: Vec<f64>, origin: u64) -> Tensor {
        let t = Tensor::from_data(rows, cols, values, false);
        t.inner.borrow_mut().origin = Some(origin);
        t
    }

    pub fn rows(&self) -> usize {
        self.inner.borrow().rows
    }

    pub fn cols(&self) -> usize {
        self.inner.borrow().cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.inner.borrow();
        (d.rows, d.cols)
    }

    pub(crate) fn shape_string(&self) -> String {
        let d = self.inner.borrow();
        format!("{}x{}", d.rows, d.cols)
    }

    pub fn len(&self) -> usize {
        let d = self.inner.borrow();
        d.rows * d.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.shape() == (1, 1)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().grad.is_some()
    }

    /// Copy of the row-major value buffer.
    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    pub fn value_at(&self, row: usize, col: usize) -> f64 {
        let d = self.inner.borrow();
        assert!(row < d.rows && col < d.cols, "index out of bounds");
        d.values[row * d.cols + col]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.borrow();
        assert_eq!((d.rows, d.cols), (1, 1), "item() on non-scalar tensor");
        d.values[0]
    }

    pub fn row_vec(&self, row: usize) -> Vec<f64> {
        let d = self.inner.borrow();
        assert!(row < d.rows, "row out of bounds");
        d.values[row * d.cols..(row + 1) * d.cols].to_vec()
    }

    /// Copy of the accumulated gradient, if this tensor requires one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.inner.borrow_mut().grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Multiply the accumulated gradient in place (batch averaging).
    pub fn scale_grad(&self, factor: f64) {
        if let Some(g) = self.inner.borrow_mut().grad.as_mut() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Overwrite values in place (optimizer updates). Shape is preserved.
    pub fn set_values(&self, values: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(values.len(), d.values.len(), "set_values length mismatch");
        d.values.copy_from_slice(values);
    }

    /// Add `delta` to one coordinate (finite-difference probing).
    pub fn nudge(&self, index: usize, delta: f64) {
        let mut d = self.inner.borrow_mut();
        d.values[index] += delta;
    }

    /// Zero the values of one row (PAD rows stay fixed at zero).
    pub(crate) fn zero_values_row(&self, row: usize) {
        let mut d = self.inner.borrow_mut();
        assert!(row < d.rows, "row out of bounds");
        let cols = d.cols;
        d.values[row * cols..(row + 1) * cols]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }

    /// Zero the accumulated gradient of one row, if gradients are tracked.
    pub(crate) fn zero_grad_row(&self, row: usize) {
        let mut d = self.inner.borrow_mut();
        assert!(row < d.rows, "row out of bounds");
        let cols = d.cols;
        if let Some(g) = d.grad.as_mut() {
            g[row * cols..(row + 1) * cols]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().values.iter().all(|v| v.is_finite())
    }

    /// Deep copy with fresh identity; gradient buffer is reset to zero.
    pub fn deep_clone(&self) -> Tensor {
        let d = self.inner.borrow();
        Tensor::from_data(d.rows, d.cols, d.values.clone(), d.grad.is_some())
    }

    pub(crate) fn expect_scalar(&self, what: &str) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "{what} must be 1x1, got {}",
                self.shape_string()
            )));
        }
        Ok(self.item())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("rows", &d.rows)
            .field("cols", &d.cols)
            .field("requires_grad", &d.grad.is_some())
            .finish()
    }
}

/// Uniform init in `[-bound, bound]` from the given RNG.
pub fn uniform_values<R: rand::Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}
