//! Dense row-major `f64` tensors and the numeric kernels shared by the tape
//! and by tape-free inference.
//!
//! Only two kinds of broadcasting exist: scalar-with-tensor, and a bias
//! vector added to every last-axis row. Everything "along the last axis"
//! treats a tensor of shape `[..., n]` as `len / n` rows of width `n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this value are treated as degenerate by [`Tensor::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Panics if `data` is empty.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[cols], &[bad.len()]));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    /// Panics on a zero dimension; use [`Tensor::new`] for untrusted shapes.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn full_like(t: &Tensor, value: f64) -> Self {
        Self {
            shape: t.shape.clone(),
            data: vec![value; t.data.len()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    /// Width of the last axis (1 for a rank-0 scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of last-axis rows.
    pub fn outer_len(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.last_dim())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix_dims("matmul", other)?;
        let (k2, n) = other.as_matrix_dims("matmul", self)?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix_dims("transpose", self)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    fn as_matrix_dims(&self, op: &'static str, other: &Tensor) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::shape(op, &self.shape, &other.shape)),
        }
    }

    /// Adds `bias` (shape `[n]`) to every last-axis row.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.shape.len() != 1 || bias.len() != self.last_dim() || self.shape.is_empty() {
            return Err(Error::shape("add_bias", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(bias.len()) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Sums over the last axis: `[..., n] -> [...]`.
    pub fn sum_last(&self) -> Tensor {
        let shape = match self.shape.split_last() {
            Some((_, rest)) => rest.to_vec(),
            None => Vec::new(),
        };
        Tensor {
            shape,
            data: self.rows().map(|r| r.iter().sum()).collect(),
        }
    }

    /// Column sums of a matrix, i.e. the reduction that undoes [`Tensor::add_row_vector`].
    pub fn sum_rows_to_vector(&self) -> Tensor {
        let w = self.last_dim();
        let mut out = vec![0.0; w];
        for row in self.rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![w],
            data: out,
        }
    }

    /// `x / ‖x‖₂` for every last-axis row.
    pub fn l2_normalize(&self) -> Result<Tensor> {
        let mut out = self.clone();
        let w = self.last_dim();
        for row in out.data.chunks_exact_mut(w) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > NORM_EPS) {
                return Err(Error::DegenerateVector {
                    norm,
                    eps: NORM_EPS,
                });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(out)
    }

    pub fn softmax(&self) -> Tensor {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.last_dim()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        out
    }

    pub fn log_softmax(&self) -> Tensor {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.last_dim()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let first = *self.shape.first().unwrap_or(&1);
        if self.shape.is_empty() || start >= end || end > first {
            return Err(Error::InvalidTensor(format!(
                "row range {start}..{end} out of bounds for shape {:?}",
                self.shape
            )));
        }
        let stride = self.data.len() / first;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Picks rows (along the first axis) by index.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let first = *self.shape.first().unwrap_or(&1);
        if self.shape.is_empty() || indices.is_empty() {
            return Err(Error::InvalidTensor("gather_rows needs rows".into()));
        }
        let stride = self.data.len() / first;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= first {
                return Err(Error::InvalidTensor(format!(
                    "row {i} out of bounds for {first} rows"
                )));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of nothing".into()))?;
        if first.shape.is_empty() {
            return Err(Error::shape("concat_rows", &first.shape, &[]));
        }
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }

    /// Index of the largest entry of each last-axis row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.rows()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}
