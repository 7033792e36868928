use std::collections::BTreeSet;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

/// A trainable matrix with its gradient accumulator and momentum buffer.
///
/// Two freeze levels exist. `frozen_rows` excludes individual rows from
/// optimizer updates (used for masked cross-entropy on classifier heads). A
/// fully frozen matrix is immutable: any attempt to update or mutably borrow
/// its values panics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamMatrix {
    values: Array2<f64>,
    #[serde(skip, default)]
    grad: Array2<f64>,
    #[serde(skip, default)]
    velocity: Array2<f64>,
    #[serde(default)]
    frozen_rows: BTreeSet<usize>,
    #[serde(default)]
    frozen: bool,
}

impl PartialEq for ParamMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
            && self.frozen_rows == other.frozen_rows
            && self.frozen == other.frozen
    }
}

impl ParamMatrix {
    pub fn new(values: Array2<f64>) -> Self {
        let dim = values.raw_dim();
        Self {
            values,
            grad: Array2::zeros(dim),
            velocity: Array2::zeros(dim),
            frozen_rows: BTreeSet::new(),
            frozen: false,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Panics on a frozen matrix.
    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        assert!(!self.frozen, "attempt to mutate a frozen parameter matrix");
        &mut self.values
    }

    pub fn grad(&self) -> &Array2<f64> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Array2<f64> {
        self.restore_buffers();
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.restore_buffers();
        self.grad.fill(0.0);
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.grad = Array2::zeros((0, 0));
        self.velocity = Array2::zeros((0, 0));
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn frozen_rows(&self) -> &BTreeSet<usize> {
        &self.frozen_rows
    }

    pub fn set_frozen_rows(&mut self, rows: impl IntoIterator<Item = usize>) {
        self.frozen_rows = rows.into_iter().collect();
    }

    pub fn clear_frozen_rows(&mut self) {
        self.frozen_rows.clear();
    }

    /// Appends `n` zero-initialized rows.
    pub fn append_rows(&mut self, n: usize) {
        assert!(!self.frozen, "attempt to grow a frozen parameter matrix");
        if n == 0 {
            return;
        }
        let mut grown = Array2::zeros((self.rows() + n, self.cols()));
        grown.slice_mut(s![..self.rows(), ..]).assign(&self.values);
        self.values = grown;
        self.reset_buffers();
    }

    /// Replaces the column range `start..end` with `width` zero columns; all
    /// other columns keep their values and relative order.
    pub fn splice_zero_columns(&mut self, start: usize, end: usize, width: usize) {
        assert!(!self.frozen, "attempt to reshape a frozen parameter matrix");
        assert!(start <= end && end <= self.cols());
        let new_cols = self.cols() - (end - start) + width;
        let mut out = Array2::zeros((self.rows(), new_cols));
        out.slice_mut(s![.., ..start])
            .assign(&self.values.slice(s![.., ..start]));
        out.slice_mut(s![.., start + width..])
            .assign(&self.values.slice(s![.., end..]));
        self.values = out;
        self.reset_buffers();
    }

    /// One momentum-SGD update: `v <- momentum * v + g`, `w <- w - lr * v`.
    /// Frozen rows keep both their values and their velocity. Clears the
    /// gradient afterwards.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) {
        assert!(!self.frozen, "attempt to update a frozen parameter matrix");
        self.restore_buffers();
        for (r, ((mut w, mut v), g)) in self
            .values
            .axis_iter_mut(Axis(0))
            .zip(self.velocity.axis_iter_mut(Axis(0)))
            .zip(self.grad.axis_iter(Axis(0)))
            .enumerate()
        {
            if self.frozen_rows.contains(&r) {
                continue;
            }
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *v = momentum * *v + *g;
                *w -= lr * *v;
            }
        }
        self.grad.fill(0.0);
    }

    /// Drops momentum state, e.g. when restoring a checkpoint.
    pub fn reset_velocity(&mut self) {
        if !self.frozen {
            self.velocity = Array2::zeros(self.values.raw_dim());
        }
    }

    fn reset_buffers(&mut self) {
        self.grad = Array2::zeros(self.values.raw_dim());
        self.velocity = Array2::zeros(self.values.raw_dim());
    }

    // Deserialized or frozen matrices carry empty buffers until first use.
    fn restore_buffers(&mut self) {
        if self.grad.raw_dim() != self.values.raw_dim() {
            self.grad = Array2::zeros(self.values.raw_dim());
        }
        if self.velocity.raw_dim() != self.values.raw_dim() {
            self.velocity = Array2::zeros(self.values.raw_dim());
        }
    }
}

/// Applies [`ParamMatrix::sgd_step`] to every matrix.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut ParamMatrix>, lr: f64, momentum: f64) {
    for p in params {
        p.sgd_step(lr, momentum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scalar_step_arithmetic() {
        let mut p = ParamMatrix::new(array![[1.0]]);
        p.grad_mut()[[0, 0]] = 2.0;
        p.sgd_step(0.1, 0.0);
        assert!((p.values()[[0, 0]] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad()[[0, 0]], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut p = ParamMatrix::new(array![[1.0, -2.0], [3.0, 4.5]]);
        let before = p.values().clone();
        p.sgd_step(0.5, 0.9);
        assert_eq!(p.values(), &before);
    }

    #[test]
    fn frozen_row_is_bit_identical() {
        let mut p = ParamMatrix::new(array![[0.1, 0.2], [0.3, 0.4]]);
        p.set_frozen_rows([1]);
        for _ in 0..5 {
            p.grad_mut().fill(1.7);
            p.sgd_step(0.3, 0.9);
        }
        assert_eq!(p.values()[[1, 0]].to_bits(), 0.3f64.to_bits());
        assert_eq!(p.values()[[1, 1]].to_bits(), 0.4f64.to_bits());
        assert!(p.values()[[0, 0]] < 0.1);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = ParamMatrix::new(array![[0.0]]);
        p.grad_mut()[[0, 0]] = 1.0;
        p.sgd_step(1.0, 0.5);
        p.grad_mut()[[0, 0]] = 1.0;
        p.sgd_step(1.0, 0.5);
        // v1 = 1, v2 = 1.5
        assert!((p.values()[[0, 0]] + 2.5).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "frozen")]
    fn frozen_matrix_rejects_updates() {
        let mut p = ParamMatrix::zeros(2, 2);
        p.freeze();
        p.sgd_step(0.1, 0.0);
    }

    #[test]
    fn splice_keeps_other_columns() {
        let mut p = ParamMatrix::new(array![[1.0, 2.0, 3.0, 9.0], [4.0, 5.0, 6.0, 8.0]]);
        p.splice_zero_columns(1, 3, 1);
        assert_eq!(p.values(), &array![[1.0, 0.0, 9.0], [4.0, 0.0, 8.0]]);
        p.splice_zero_columns(1, 1, 2);
        assert_eq!(p.values(), &array![[1.0, 0.0, 0.0, 0.0, 9.0], [4.0, 0.0, 0.0, 0.0, 8.0]]);
    }
}
