use crate::error::{input_err, shape_err, Error, Result};
use crate::numerics::Scalar;
use num_traits::Zero;

/// Dense row-major matrix.
///
/// Values are immutable after construction; every operation returns a new
/// matrix. Entries are validated to be finite at the public boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// Builds a matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(
                "matrix",
                format!("expected {rows}x{cols} = {} values, got {}", rows * cols, data.len()),
            );
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "matrix" });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from nested rows; every row must have the same length.
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return shape_err("matrix", "ragged rows".to_string());
        }
        Matrix::from_vec(r, c, rows.into_iter().flatten().collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Standard matrix product with deterministic accumulation order:
    /// row-major output, inner index ascending, sums carried in `T::Acc`.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != rhs.rows {
            return shape_err(
                "matmul",
                format!(
                    "left is {}x{}, right is {}x{}",
                    self.rows, self.cols, rhs.rows, rhs.cols
                ),
            );
        }
        let mut data = Vec::with_capacity(self.rows * rhs.cols);
        for i in 0..self.rows {
            let lrow = self.row(i);
            for j in 0..rhs.cols {
                let mut acc = T::Acc::zero();
                for (k, &a) in lrow.iter().enumerate() {
                    acc += a.acc() * rhs.get(k, j).acc();
                }
                data.push(T::from_acc(acc));
            }
        }
        let out = Matrix {
            rows: self.rows,
            cols: rhs.cols,
            data,
        };
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix<T> {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return shape_err(
                "add",
                format!(
                    "left is {}x{}, right is {}x{}",
                    self.rows, self.cols, rhs.rows, rhs.cols
                ),
            );
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a + b)
            .collect();
        let out = Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        out.ensure_finite("add")?;
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Replaces a row; used by fixture builders in tests.
    pub fn set_row(&mut self, i: usize, row: &[T]) -> Result<()> {
        if row.len() != self.cols {
            return input_err("set_row", format!("row length {} != {}", row.len(), self.cols));
        }
        self.data[i * self.cols..(i + 1) * self.cols].copy_from_slice(row);
        Ok(())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// arg `x` of length `cols`; returns `self * x` with `Acc` sums.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return shape_err(
                "matvec",
                format!("matrix is {}x{}, vector has {}", self.rows, self.cols, x.len()),
            );
        }
        Ok((0..self.rows)
            .map(|i| {
                let mut acc = T::Acc::zero();
                for (a, &b) in self.row(i).iter().zip(x) {
                    acc += a.acc() * b.acc();
                }
                T::from_acc(acc)
            })
            .collect())
    }

    /// Returns `x * self` for a row vector `x` of length `rows`.
    pub fn vecmat(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.rows {
            return shape_err(
                "vecmat",
                format!("vector has {}, matrix is {}x{}", x.len(), self.rows, self.cols),
            );
        }
        let mut out = Vec::with_capacity(self.cols);
        for j in 0..self.cols {
            let mut acc = T::Acc::zero();
            for (i, &b) in x.iter().enumerate() {
                acc += b.acc() * self.get(i, j).acc();
            }
            out.push(T::from_acc(acc));
        }
        Ok(out)
    }
}

/// Dot product accumulated in `T::Acc`.
pub(crate) fn dot_acc<T: Scalar>(a: &[T], b: &[T]) -> T::Acc {
    let mut acc = T::Acc::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x.acc() * y.acc();
    }
    acc
}
