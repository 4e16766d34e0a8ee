//! Dense row-major float64 tensors.
//!
//! `Tensor` is plain data: shape + buffer + optional gradient buffer. All
//! graph bookkeeping lives on the [`crate::tape::Tape`]; a tensor outside a
//! tape is just storage (model parameters, trial signals, reports).

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::Trng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::shape(
                "tensor",
                alloc::format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian init with the given std, marked trainable.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut Trng) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: rng.fill_normal(numel, std),
            grad: None,
            requires_grad: true,
        }
    }

    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros_param(shape: impl Into<Vec<usize>>) -> Self {
        let mut t = Self::zeros(shape);
        t.requires_grad = true;
        t
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

    /// Number of rows for a rank-2 tensor (rank-1 counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.cols();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|&v| math::is_finite(v))
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite { op, step: None })
        }
    }

    /// Max |a - b| over all elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(CoreError::shape(
                "max_abs_diff",
                alloc::format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| math::abs(a - b))
            .fold(0.0, f64::max))
    }

    /// Stack rank-2 tensors along rows. All inputs must share the column count.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(CoreError::Empty { op: "vstack" });
        }
        let cols = parts[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(CoreError::shape("vstack", "column mismatch".to_string()));
            }
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        Tensor::new([rows, cols], data)
    }

    /// Copy of rows [start, start+len).
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let w = self.cols();
        if start + len > self.rows() {
            return Err(CoreError::shape(
                "slice_rows",
                alloc::format!("rows {}..{} out of {}", start, start + len, self.rows()),
            ));
        }
        Tensor::new([len, w], self.data[start * w..(start + len) * w].to_vec())
    }

    /// Concatenate two rank-2 tensors column-wise.
    pub fn hcat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rows() != b.rows() {
            return Err(CoreError::shape("hcat", "row mismatch".to_string()));
        }
        let (wa, wb) = (a.cols(), b.cols());
        let rows = a.rows();
        let mut data = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Tensor::new([rows, wa + wb], data)
    }
}
