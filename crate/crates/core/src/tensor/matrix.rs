use crate::error::{Error, Result};

/// Rows with an L2 norm below this cannot be unit-normalized.
pub const NORM_EPS: f64 = 1e-12;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Size {
                op: "Matrix::new",
                detail: format!("{} values for a {rows}x{cols} matrix", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", (1, cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Standard matrix product. Each output entry accumulates over the inner
    /// index in increasing order, so `a·bᵀ` and `b·aᵀ` agree bitwise up to
    /// transposition.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_vec_unchecked(n, m, out))
    }

    /// `self · otherᵀ`, computed as row dot products.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_transposed",
                self.shape(),
                other.shape(),
            ));
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.push(dot(a, other.row(j)));
            }
        }
        Ok(Matrix::from_vec_unchecked(self.rows, other.rows, out))
    }

    /// Row-wise softmax of `self / scale`, with per-row max subtraction.
    pub fn row_softmax(&self, scale: f64) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r), scale);
        }
        out
    }

    /// Scales every row to unit L2 norm.
    pub fn row_unit_normalize(&self) -> Result<Matrix> {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let norm = dot(row, row).sqrt();
            if norm < NORM_EPS {
                return Err(Error::DegenerateRow {
                    row: r,
                    eps: NORM_EPS,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Adds a `1 x cols` bias to every row.
    pub fn add_row_bias(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape("add_row_bias", self.shape(), bias.shape()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(Error::Size {
                op: "slice_cols",
                detail: format!("range {start}..{end} of {} columns", self.cols),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Matrix::from_vec_unchecked(self.rows, w, data))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::Size {
                op: "slice_rows",
                detail: format!("range {start}..{end} of {} rows", self.rows),
            });
        }
        Ok(Matrix::from_vec_unchecked(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        ))
    }

    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::shape("concat_rows", (rows, cols), m.shape()));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix::from_vec_unchecked(rows, cols, data))
    }

    pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::shape("concat_cols", (rows, 0), bad.shape()));
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix::from_vec_unchecked(rows, cols, data))
    }

    /// Mean over rows, as a `1 x cols` matrix.
    pub fn mean_rows(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Matrix::from_vec_unchecked(1, self.cols, out)
    }

    /// Repeats a single-row matrix `n` times.
    pub fn repeat_rows(&self, n: usize) -> Result<Matrix> {
        if self.rows != 1 {
            return Err(Error::shape("repeat_rows", (1, self.cols), self.shape()));
        }
        Ok(Matrix::from_vec_unchecked(
            n,
            self.cols,
            self.data.repeat(n),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / scale));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v / scale - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, 3, 4);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&Matrix::identity(4)).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 2);
        let mut expected = Matrix::zeros(5, 2);
        for i in 0..5 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.get(i, k) * b.get(k, j);
                }
                expected.set(i, j, s);
            }
        }
        assert_eq!(a.matmul(&b).unwrap().max_abs_diff(&expected), 0.0);
        assert_eq!(
            a.matmul_transposed(&b.transpose())
                .unwrap()
                .max_abs_diff(&expected),
            0.0
        );
    }

    #[test]
    fn product_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3)
            .matmul(&Matrix::zeros(2, 3))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let m = Matrix::from_rows(&[[2.0, 2.0, 2.0, 2.0]])
            .unwrap()
            .row_softmax(1.0);
        assert!(m.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let col = Matrix::from_rows(&[[5.0], [-3.0]])
            .unwrap()
            .row_softmax(2.0);
        assert_eq!(col.data(), &[1.0, 1.0]);

        let big = Matrix::from_rows(&[[1000.0, 0.0]])
            .unwrap()
            .row_softmax(1.0);
        assert!(big.is_finite());
        assert!((big.get(0, 0) - 1.0).abs() < 1e-12 && big.get(0, 1) < 1e-300);
    }

    #[test]
    fn normalize_cases() {
        let m = Matrix::from_rows(&[[3.0, 4.0]])
            .unwrap()
            .row_unit_normalize()
            .unwrap();
        assert!((m.get(0, 0) - 0.6).abs() < 1e-15 && (m.get(0, 1) - 0.8).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random(&mut rng, 6, 8).row_unit_normalize().unwrap();
        for i in 0..6 {
            assert!((dot(r.row(i), r.row(i)).sqrt() - 1.0).abs() < 1e-9);
        }
        let again = r.row_unit_normalize().unwrap();
        assert!(again.max_abs_diff(&r) < 1e-12);

        let err = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1e-14]])
            .unwrap()
            .row_unit_normalize();
        assert!(matches!(err, Err(Error::DegenerateRow { row: 1, .. })));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e4f64..1e4, 1..40), scale in 0.01f64..100.0) {
                let n = vals.len();
                let m = Matrix::new(1, n, vals).unwrap().row_softmax(scale);
                prop_assert!((m.sum() - 1.0).abs() < 1e-9);
                prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }

            #[test]
            fn identity_is_exact(vals in proptest::collection::vec(-1e3f64..1e3, 12)) {
                let m = Matrix::new(3, 4, vals).unwrap();
                prop_assert_eq!(&m.matmul(&Matrix::identity(4)).unwrap(), &m);
                prop_assert_eq!(&Matrix::identity(3).matmul(&m).unwrap(), &m);
            }

            #[test]
            fn normalize_idempotent(vals in proptest::collection::vec(0.5f64..10.0, 12)) {
                let m = Matrix::new(4, 3, vals).unwrap().row_unit_normalize().unwrap();
                prop_assert!(m.row_unit_normalize().unwrap().max_abs_diff(&m) < 1e-12);
            }
        }
    }
}
