use std::fmt;
use std::ops::Index;

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
///
/// Both dimensions are positive and every entry is finite. Arithmetic that
/// would produce a NaN or infinity returns [`Error::NonFinite`] instead.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::BufferLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Matrix { rows, cols, data }.validated()
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        Ok(Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    /// Square matrix with `diag` on the main diagonal.
    pub fn diag(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut m = Self::zeros(n, n)?;
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m.validated()
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: (i, row.len()),
                    rhs: (rows.len(), cols),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(rows > 0 && cols > 0);
        Matrix { rows, cols, data }
    }

    pub(crate) fn validated(self) -> Result<Self> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / self.cols,
                col: pos % self.cols,
                value: self.data[pos],
            });
        }
        Ok(self)
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

    /// Row-major backing buffer.
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Result<Matrix> {
        if start >= end || end > self.cols {
            return Err(Error::Shape {
                op: "columns",
                lhs: self.shape(),
                rhs: (start, end),
            });
        }
        let width = end - start;
        let mut out = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            out.extend_from_slice(&self.data[i * self.cols + start..i * self.cols + end]);
        }
        Ok(Matrix::from_raw(self.rows, width, out))
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Result<Matrix> {
        if start >= end || end > self.rows {
            return Err(Error::Shape {
                op: "row_block",
                lhs: self.shape(),
                rhs: (start, end),
            });
        }
        Ok(Matrix::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        ))
    }

    /// Picks the listed rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        if indices.is_empty() {
            return Err(Error::EmptyMatrix {
                rows: 0,
                cols: self.cols,
            });
        }
        let mut out = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Shape {
                    op: "select_rows",
                    lhs: self.shape(),
                    rhs: (i, 0),
                });
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(Matrix::from_raw(indices.len(), self.cols, out))
    }

    /// `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "hstack",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut out = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            out.extend_from_slice(self.row(i));
            out.extend_from_slice(other.row(i));
        }
        Ok(Matrix::from_raw(self.rows, cols, out))
    }

    /// `[self ; other]`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "vstack",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix::from_raw(self.rows + other.rows, self.cols, data))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        matmul(self, rhs)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", rhs, |a, b| a - b)
    }

    pub fn scaled(&self, k: f64) -> Result<Matrix> {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * k).collect()).validated()
    }

    /// `self + k * rhs`.
    pub fn add_scaled(&self, k: f64, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("add_scaled", rhs, |a, b| a + k * b)
    }

    /// In-place `self += k * rhs`.
    pub fn add_scaled_assign(&mut self, k: f64, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape {
                op: "add_scaled_assign",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut next = self.data.clone();
        for (a, b) in next.iter_mut().zip(&rhs.data) {
            *a += k * b;
        }
        *self = Matrix::from_raw(self.rows, self.cols, next).validated()?;
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    fn zip_with(&self, op: &'static str, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Matrix::from_raw(self.rows, self.cols, data).validated()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(i < self.rows && j < self.cols, "index ({i}, {j}) out of bounds");
        &self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Standard matrix product.
pub fn matmul(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if lhs.cols != rhs.rows {
        return Err(Error::Shape {
            op: "matmul",
            lhs: lhs.shape(),
            rhs: rhs.shape(),
        });
    }
    let (m, k, n) = (lhs.rows, lhs.cols, rhs.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a = lhs.data[i * k + p];
            if a == 0.0 {
                continue;
            }
            let rhs_row = &rhs.data[p * n..(p + 1) * n];
            for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                *o += a * b;
            }
        }
    }
    Matrix::from_raw(m, n, out).validated()
}

/// `sqrt(sum of squared entries)`.
pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}
