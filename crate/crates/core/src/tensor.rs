//! Dense row-major `f64` tensors.
//!
//! Only what the denoiser and the losses need: rank-1/rank-2 storage,
//! elementwise arithmetic and a row-independent matrix product. Each output
//! row of [`Tensor::matmul_t`] is accumulated in a fixed order that does not
//! depend on the other rows, so batching trajectories together never changes
//! per-trajectory results.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equally sized rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows when viewed as a matrix (rank-1 tensors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Returns the single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self (n x k) * other^T` where `other` is `m x k`; result is `n x m`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::shape("matmul_t", &self.shape, &other.shape));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            let o = &mut out[i * m..(i + 1) * m];
            for (j, oj) in o.iter_mut().enumerate() {
                let b = &other.data[j * k..(j + 1) * k];
                *oj = dot(a, b);
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// `self (n x m)` times `other (m x k)`; result is `n x k`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (n, m, k) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let o = &mut out[i * k..(i + 1) * k];
            for p in 0..m {
                let a = self.data[i * m + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * k..(p + 1) * k];
                for (oj, &bj) in o.iter_mut().zip(b) {
                    *oj += a * bj;
                }
            }
        }
        Tensor::matrix(n, k, out)
    }

    /// `self^T (m x n)` times `other (n x k)` where `self` is `n x m`.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[0] != other.shape[0] {
            return Err(Error::shape("t_matmul", &self.shape, &other.shape));
        }
        let (n, m, k) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * k];
        for i in 0..n {
            let b = &other.data[i * k..(i + 1) * k];
            for p in 0..m {
                let a = self.data[i * m + p];
                if a == 0.0 {
                    continue;
                }
                let o = &mut out[p * k..(p + 1) * k];
                for (oj, &bj) in o.iter_mut().zip(b) {
                    *oj += a * bj;
                }
            }
        }
        Tensor::matrix(m, k, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
