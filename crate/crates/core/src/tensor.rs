//! Dense row-major tensor over `f64`.
//!
//! The autodiff tape and the model only ever need rank-1 and rank-2
//! tensors, so this stays deliberately small: a flat buffer, a shape,
//! and the handful of kernels the graph ops are built from.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                format!("{shape:?} ({numel} elements)"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape("scalar", format!("{:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Columns of a rank-2 tensor, or the length of a rank-1 tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.data.len(),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?}", self.shape), format!("{:?}", other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// `self (r,k) x other (k,c) -> (r,c)`. Rank-1 operands are treated as
    /// a single row on the left and a single column is not inferred; both
    /// sides must agree on the inner dimension.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k1) = (self.rows(), self.cols());
        let (k2, c) = (other.rows(), other.cols());
        if k1 != k2 {
            return Err(Error::shape(
                format!("inner dims equal, lhs {:?}", self.shape),
                format!("rhs {:?}", other.shape),
            ));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for k in 0..k1 {
                let a = self.data[i * k1 + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * c..(k + 1) * c];
                let dst = &mut out[i * c..(i + 1) * c];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Tensor::new(vec![r, c], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data }
    }

    /// Stack rank-2 tensors with equal column counts along axis 0.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows needs at least one part"));
        }
        let cols = parts[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::shape(format!("{cols} columns"), format!("{:?}", p.shape)));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, cols], data)
    }

    /// Stack rank-2 tensors with equal row counts along axis 1.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols needs at least one part"));
        }
        let rows = parts[0].rows();
        for p in parts {
            if p.rows() != rows {
                return Err(Error::shape(format!("{rows} rows"), format!("{:?}", p.shape)));
            }
        }
        let total_cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for p in parts {
            let c = p.cols();
            for i in 0..rows {
                data[i * total_cols + offset..i * total_cols + offset + c]
                    .copy_from_slice(&p.data[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        Tensor::new(vec![rows, total_cols], data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if start + len > r {
            return Err(Error::contract(format!("row slice {start}..{} out of {r}", start + len)));
        }
        Tensor::new(vec![len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if start + len > c {
            return Err(Error::contract(format!("col slice {start}..{} out of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Tensor::new(vec![r, len], data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matmul_2x3_3x2() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_abs_diff_eq!(c.data()[0], 58.0);
        assert_abs_diff_eq!(c.data()[1], 64.0);
        assert_abs_diff_eq!(c.data()[2], 139.0);
        assert_abs_diff_eq!(c.data()[3], 154.0);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.transpose(), a);
    }

    #[test]
    fn concat_and_slice_inverse() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let cat = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[3, 2]);
        assert_eq!(cat.slice_rows(0, 1).unwrap(), a);
        assert_eq!(cat.slice_rows(1, 2).unwrap(), b);

        let side = Tensor::concat_cols(&[&b, &b]).unwrap();
        assert_eq!(side.shape(), &[2, 4]);
        assert_eq!(side.slice_cols(2, 2).unwrap(), b);
    }

    #[test]
    fn new_rejects_wrong_len() {
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }
}
