//! The operation set shared by eager evaluation and the gradient tape.
//!
//! Model code is written once against [`Ops`]; running it with [`Eager`]
//! produces plain matrices, running it with a [`Tape`](super::Tape)
//! records every step for reverse-mode differentiation.

use super::grid::{bilinear_forward, conv2d_forward};
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the loss.
pub const PROB_EPS: f64 = 1e-7;

pub trait Ops {
    type T: Clone;

    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Matrix;
    fn constant(&mut self, m: Matrix) -> Self::T;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    /// `a · bᵀ`.
    fn matmul_transposed(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn hadamard(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn scale(&mut self, a: &Self::T, s: f64) -> Self::T;
    fn add_row_bias(&mut self, a: &Self::T, bias: &Self::T) -> Result<Self::T>;
    fn row_unit_normalize(&mut self, a: &Self::T) -> Result<Self::T>;
    fn row_softmax(&mut self, a: &Self::T, scale: f64) -> Self::T;
    fn slice_cols(&mut self, a: &Self::T, start: usize, end: usize) -> Result<Self::T>;
    fn slice_rows(&mut self, a: &Self::T, start: usize, end: usize) -> Result<Self::T>;
    fn concat_rows(&mut self, parts: &[Self::T]) -> Result<Self::T>;
    fn concat_cols(&mut self, parts: &[Self::T]) -> Result<Self::T>;
    fn mean_rows(&mut self, a: &Self::T) -> Self::T;
    fn repeat_rows(&mut self, a: &Self::T, n: usize) -> Result<Self::T>;
    /// Bilinear resize of a `(h*w) x c` grid to `out_h x out_w`.
    fn bilinear(
        &mut self,
        a: &Self::T,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self::T>;
    /// 3x3 same-padding convolution of a `(h*w) x c` grid.
    fn conv2d(
        &mut self,
        a: &Self::T,
        h: usize,
        w: usize,
        kernel: &Self::T,
        bias: &Self::T,
    ) -> Result<Self::T>;
    fn sigmoid(&mut self, a: &Self::T) -> Self::T;
    /// Mean binary cross-entropy against a fixed binary target, as a `1 x 1`.
    fn bce(&mut self, probs: &Self::T, truth: &Matrix) -> Result<Self::T>;

    /// `x · weight + bias`.
    fn affine(&mut self, x: &Self::T, weight: &Self::T, bias: &Self::T) -> Result<Self::T> {
        let xw = self.matmul(x, weight)?;
        self.add_row_bias(&xw, bias)
    }
}

/// Direct evaluation on owned matrices.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_value(probs: &Matrix, truth: &Matrix) -> Result<f64> {
    if probs.shape() != truth.shape() {
        return Err(Error::shape("bce_loss", probs.shape(), truth.shape()));
    }
    let n = probs.data().len().max(1) as f64;
    let total: f64 = probs
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n)
}

impl Ops for Eager {
    type T = Matrix;

    fn value<'a>(&'a self, t: &'a Matrix) -> &'a Matrix {
        t
    }

    fn constant(&mut self, m: Matrix) -> Matrix {
        m
    }

    fn matmul(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.matmul(b)
    }

    fn matmul_transposed(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.matmul_transposed(b)
    }

    fn add(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.add(b)
    }

    fn hadamard(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.hadamard(b)
    }

    fn scale(&mut self, a: &Matrix, s: f64) -> Matrix {
        a.scale(s)
    }

    fn add_row_bias(&mut self, a: &Matrix, bias: &Matrix) -> Result<Matrix> {
        a.add_row_bias(bias)
    }

    fn row_unit_normalize(&mut self, a: &Matrix) -> Result<Matrix> {
        a.row_unit_normalize()
    }

    fn row_softmax(&mut self, a: &Matrix, scale: f64) -> Matrix {
        a.row_softmax(scale)
    }

    fn slice_cols(&mut self, a: &Matrix, start: usize, end: usize) -> Result<Matrix> {
        a.slice_cols(start, end)
    }

    fn slice_rows(&mut self, a: &Matrix, start: usize, end: usize) -> Result<Matrix> {
        a.slice_rows(start, end)
    }

    fn concat_rows(&mut self, parts: &[Matrix]) -> Result<Matrix> {
        Matrix::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    fn concat_cols(&mut self, parts: &[Matrix]) -> Result<Matrix> {
        Matrix::concat_cols(&parts.iter().collect::<Vec<_>>())
    }

    fn mean_rows(&mut self, a: &Matrix) -> Matrix {
        a.mean_rows()
    }

    fn repeat_rows(&mut self, a: &Matrix, n: usize) -> Result<Matrix> {
        a.repeat_rows(n)
    }

    fn bilinear(
        &mut self,
        a: &Matrix,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Matrix> {
        bilinear_forward(a, h, w, out_h, out_w)
    }

    fn conv2d(
        &mut self,
        a: &Matrix,
        h: usize,
        w: usize,
        kernel: &Matrix,
        bias: &Matrix,
    ) -> Result<Matrix> {
        conv2d_forward(a, h, w, kernel, bias)
    }

    fn sigmoid(&mut self, a: &Matrix) -> Matrix {
        a.map(sigmoid)
    }

    fn bce(&mut self, probs: &Matrix, truth: &Matrix) -> Result<Matrix> {
        Ok(Matrix::from_vec_unchecked(
            1,
            1,
            vec![bce_value(probs, truth)?],
        ))
    }
}
