//! Dense row-major matrix with the handful of operations the engine needs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense matrix, row-major storage.
#[derive(Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, S::one());
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadDimensions { rows, cols, len: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Convenience constructor for literal test matrices.
    pub fn from_rows(rows: &[&[S]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Definitional product with a fixed accumulation order (k innermost of
    /// the classic i-k-j loop), so results are reproducible run to run.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a_ik * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: S) -> Self {
        let data = self.data.iter().map(|&v| v * s).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Largest absolute entry; zero for empty matrices.
    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gather a column subset into a new rows x indices.len() matrix.
    pub fn gather_cols(&self, indices: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, indices.len());
        for r in 0..self.rows {
            for (j, &c) in indices.iter().enumerate() {
                out.set(r, j, self.get(r, c));
            }
        }
        out
    }

    /// Gather a row subset into a new indices.len() x cols matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut out = Self::zeros(indices.len(), self.cols);
        for (i, &r) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    /// Scatter rows of `src` back into `self` at the given row indices.
    pub fn scatter_rows(&mut self, indices: &[usize], src: &Self) {
        assert_eq!(indices.len(), src.rows());
        assert_eq!(self.cols, src.cols());
        for (i, &r) in indices.iter().enumerate() {
            self.row_mut(r).copy_from_slice(src.row(i));
        }
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let mut max = S::neg_infinity();
            for &v in row.iter() {
                max = max.max(v);
            }
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// Cast entries to another scalar type (used by snapshot precision modes).
    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        let data = self.data.iter().map(|&v| T::lit(v.to_f64_lossy())).collect();
        Matrix { rows: self.rows, cols: self.cols, data: data }
    }
}

impl<S: Scalar> std::fmt::Debug for Matrix<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  [")?;
            for c in 0..self.cols.min(8) {
                write!(f, "{:>12.5e} ", self.get(r, c).to_f64_lossy())?;
            }
            writeln!(f, "{}]", if self.cols > 8 { "..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Mat = Matrix<f64>;

    /// Independent oracle: definitional triple loop in i-j-k order, distinct
    /// from the implementation's i-k-j accumulation.
    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        assert_eq!(a.cols(), b.rows());
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_times_anything() {
        let m = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let i3 = Mat::identity(3);
        let p = i3.matmul(&m).unwrap();
        assert_eq!(p.data(), m.data());
    }

    #[test]
    fn hand_multiplication() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Mat::from_rows(&[&[5.0], &[6.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.get(0, 0), 17.0);
        assert_eq!(c.get(1, 0), 39.0);
        let oracle = naive_matmul(&a, &b);
        assert_eq!(c.data(), oracle.data());
    }

    #[test]
    fn zero_annihilates() {
        let z = Mat::zeros(2, 3);
        let m = Mat::from_rows(&[&[1.0, -1.0], &[2.0, 0.5], &[7.0, 3.0]]);
        let p = z.matmul(&m).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.shape(), (2, 2));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_constant_row() {
        let m = Mat::zeros(1, 4).softmax_rows();
        for c in 0..4 {
            assert!((m.get(0, c) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let m = Mat::from_rows(&[&[1000.0, 0.0]]).softmax_rows();
        assert!(m.is_finite());
        assert!((m.get(0, 0) - 1.0).abs() <= 1e-12);
        assert!(m.get(0, 1).abs() <= 1e-12);
    }

    #[test]
    fn softmax_analytic_row() {
        let m = Mat::from_rows(&[&[1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]]).softmax_rows();
        assert!((m.get(0, 0) - 1.0 / 6.0).abs() < 1e-15);
        assert!((m.get(0, 1) - 2.0 / 6.0).abs() < 1e-15);
        assert!((m.get(0, 2) - 3.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = Mat::from_rows(&[&[0.3, -2.0, 5.5, 0.0], &[9.0, 9.0, -9.0, 1.0]]).softmax_rows();
        for r in 0..2 {
            let sum: f64 = m.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(m.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gather_scatter_round_trip() {
        let m = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let sub = m.gather_rows(&[2, 0]);
        assert_eq!(sub.row(0), &[5.0, 6.0]);
        let mut target = Mat::zeros(3, 2);
        target.scatter_rows(&[2, 0], &sub);
        assert_eq!(target.row(2), &[5.0, 6.0]);
        assert_eq!(target.row(0), &[1.0, 2.0]);
        assert_eq!(target.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn generic_over_f32() {
        let a = Matrix::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = a.matmul(&Matrix::<f32>::identity(2)).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
