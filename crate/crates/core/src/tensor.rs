//! Dense row-major `rows x cols` matrices.

use rand::Rng;

use crate::error::{shape_err, PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::scalar::Scalar;

/// Dense `N x D` matrix in row-major order. Rows are tokens, columns channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::one())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Tensor2::from_vec",
                format!("{} elements", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(shape_err("Tensor2::from_rows", format!("{c} columns"), format!("{} columns", row.len())));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: r, cols: c, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn uniformly from `[-half_width, half_width]`.
    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, half_width: f64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.gen_range(-half_width..=half_width)))
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "Tensor2::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "Tensor2::sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "Tensor2::add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape(other, "Tensor2::axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Self, context: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, context)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                context,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius inner product `sum(self .* other)`.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "Tensor2::dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    /// Plain dense product `self * rhs`, i-k-j loop order.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(shape_err(
                "Tensor2::matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("{}", rhs.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        matmul_into(&self.data, &rhs.data, &mut out.data, self.rows, self.cols, rhs.cols);
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor2<U> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// `out += a (m x k) * b (k x n)`, all row-major.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// Elementwise product; books `rows * cols` MACs.
pub fn hadamard<T: Scalar>(a: &Tensor2<T>, b: &Tensor2<T>, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
    let out = a.zip_with(b, "hadamard", |x, y| x * y)?;
    ledger.add(FlopCategory::Hadamard, a.len() as u64);
    Ok(out)
}

/// Norm-wise relative error `max|a - b| / max|b|` (absolute when `b` is zero).
pub fn rel_err<T: Scalar>(a: &Tensor2<T>, b: &Tensor2<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_err: shape mismatch");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs().to_f64_lossy()));
    let scale = b.max_abs().to_f64_lossy();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub(crate) fn ensure_finite<T: Scalar>(t: &Tensor2<T>, stage: impl Into<String>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(PadreError::NonFinite { stage: stage.into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2<f64> {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor2::<f64>::from_vec(2, 3, vec![0.0; 5]).is_err());
        assert!(Tensor2::<f64>::from_vec(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn hadamard_identities_and_example() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let mut ledger = FlopLedger::new();
        assert_eq!(hadamard(&a, &Tensor2::ones(2, 2), &mut ledger).unwrap(), a);
        assert_eq!(hadamard(&a, &Tensor2::zeros(2, 2), &mut ledger).unwrap(), Tensor2::zeros(2, 2));

        // scalar-loop oracle
        let mut expected = Tensor2::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                expected.set(i, j, a.get(i, j) * b.get(i, j));
            }
        }
        let got = hadamard(&a, &b, &mut ledger).unwrap();
        assert_eq!(got, expected);
        assert_eq!(got, t(&[&[5.0, 12.0], &[21.0, 32.0]]));
        assert_eq!(ledger.category_macs(FlopCategory::Hadamard), 12);
    }

    #[test]
    fn hadamard_rejects_shape_mismatch() {
        let mut ledger = FlopLedger::new();
        let err = hadamard(&Tensor2::<f64>::zeros(2, 2), &Tensor2::zeros(2, 3), &mut ledger);
        assert!(matches!(err, Err(PadreError::Shape { .. })));
    }

    #[test]
    fn matmul_small() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(a.matmul(&b).unwrap(), t(&[&[2.0, 1.0], &[4.0, 3.0]]));
    }

    #[test]
    fn rel_err_is_normwise() {
        let a = t(&[&[1.0, 2.0]]);
        let b = t(&[&[1.0, 2.5]]);
        assert!((rel_err(&a, &b) - 0.2).abs() < 1e-15);
        assert_eq!(rel_err(&Tensor2::<f64>::zeros(1, 2), &Tensor2::zeros(1, 2)), 0.0);
    }
}
