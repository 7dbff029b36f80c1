use std::fmt::Debug;

use num_traits::Float;
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of the kernel: `f32` for training and
/// inference, `f64` for gradient verification.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + std::iter::Sum + Serialize + DeserializeOwned + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major 2-D tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(v: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = Self::zeros(self.rows, n);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * n..(r + 1) * n];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for c in 0..other.rows {
                out.data[r * other.rows + c] = dot(a, other.row(c));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = Self::zeros(self.cols, n);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &bv) in out.data[i * n..(i + 1) * n].iter_mut().zip(b) {
                    *o = *o + a * bv;
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Numerically stable softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        match axis {
            1 => softmax_rows(self),
            0 => Ok(softmax_rows(&self.transpose())?.transpose()),
            _ => Err(Error::Shape(format!("softmax axis {axis} on a 2-D tensor"))),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Result<Matrix<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Row-wise layer normalization; returns `(output, normalized, inv_std)`.
pub(crate) fn layer_norm_rows<T: Scalar>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
    eps: T,
) -> Result<(Matrix<T>, Matrix<T>, Vec<T>)> {
    let d = x.cols;
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(Error::Shape(format!(
            "layer norm width {d} with gain {:?} and bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let n = T::of(d as f64);
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = xhat.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    let mut out = xhat.clone();
    for r in 0..x.rows {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = *v * gain.data[c] + bias.data[c];
        }
    }
    Ok((out, xhat, inv_std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_stable() {
        let m = Matrix::<f32>::row_vector(vec![0.0, 0.0, 0.0]).softmax(1).unwrap();
        for v in m.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let m = Matrix::<f32>::row_vector(vec![1000.0, 0.0]).softmax(1).unwrap();
        assert!(m.is_finite());
        assert!((m.data()[0] - 1.0).abs() < 1e-7 && m.data()[1] < 1e-30);
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let x = Matrix::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let s = x.softmax(0).unwrap();
        assert!((s[(0, 0)] + s[(1, 0)] - 1.0).abs() < 1e-12);
        assert!((s[(0, 1)] + s[(1, 1)] - 1.0).abs() < 1e-12);
        assert!(x.softmax(2).is_err());
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Matrix::<f32>::row_vector(vec![f32::NAN, 0.0]);
        assert!(matches!(x.softmax(1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::<f64>::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[-1.0, 7.5, -1.0, 18.0]);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn layer_norm_hand_values() {
        let one = Matrix::<f64>::filled(1, 2, 1.0);
        let zero = Matrix::<f64>::zeros(1, 2);
        let (y, _, _) =
            layer_norm_rows(&Matrix::row_vector(vec![1.0, -1.0]), &one, &zero, 1e-5).unwrap();
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - want).abs() < 1e-12 && (y.data()[1] + want).abs() < 1e-12);
        assert!((want - 0.999995).abs() < 1e-6);

        let (y, _, _) =
            layer_norm_rows(&Matrix::row_vector(vec![3.0, 3.0]), &one, &zero, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);

        let bias = Matrix::row_vector(vec![0.25, -0.5]);
        let (y, _, _) =
            layer_norm_rows(&Matrix::row_vector(vec![7.0, -2.0]), &zero, &bias, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.25, -0.5]);

        assert!(layer_norm_rows(&Matrix::row_vector(vec![1.0, 2.0, 3.0]), &one, &zero, 1e-5).is_err());
    }
}
