//! Dense row-major tensor with 64-bit storage and a fixed, reproducible
//! summation order in every reduction. Only the operations the scan module
//! needs — this is not a general broadcasting engine.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of `f64` in row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Reduction kinds for [`Tensor::reduce`]. `Std` is the population standard
/// deviation (divide by the count, not count - 1) and is exactly 0 whenever
/// all values along the axis are equal, with no rounding residue from the
/// mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Max,
    Min,
    Std,
    Sum,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Validation(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} implies {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// M x M identity.
    pub fn eye(m: usize) -> Self {
        let mut t = Tensor::zeros([m, m]);
        for i in 0..m {
            t.data[i * m + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for k in (0..self.shape.len().saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.shape[k + 1];
        }
        s
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = self.strides();
        idx.iter().zip(&strides).map(|(i, s)| i * s).sum()
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let f = self.flat_index(idx);
        self.data[f] = value;
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose2", &self.shape, &[0, 0]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros([n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    /// Matrix product of `self` (M x K) and `rhs` (K x N). Accumulation runs
    /// in ascending k for every output element, so the result is
    /// bit-reproducible.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &rhs.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for kk in 0..k {
                let a = self.data[i * k + kk];
                let row = &rhs.data[kk * n..(kk + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Tensor::new([m, n], out)
    }

    /// Reduce along `axis`, removing it from the shape. All reductions walk
    /// the axis in ascending index order.
    pub fn reduce(&self, axis: usize, kind: Reduction) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim("reduce", &self.shape, &[axis]));
        }
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out_shape: Vec<usize> = self.shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let slice = (0..extent).map(|j| self.data[base + j * inner]);
                out.push(reduce_slice(slice, extent, kind));
            }
        }
        Tensor::new(out_shape, out)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn relu(&self) -> Tensor {
        self.map(relu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn softplus(&self) -> Tensor {
        self.map(softplus)
    }

    pub fn silu(&self) -> Tensor {
        self.map(silu)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip("sub", rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip("mul", rhs, |a, b| a * b)
    }

    /// Pointwise binary op. Shapes must match exactly, or one side must be a
    /// single-element tensor, which is broadcast.
    fn zip(&self, op: &'static str, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == rhs.shape {
            let data = self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        if rhs.len() == 1 {
            let b = rhs.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.len() == 1 {
            let a = self.data[0];
            return Ok(Tensor {
                shape: rhs.shape.clone(),
                data: rhs.data.iter().map(|&b| f(a, b)).collect(),
            });
        }
        Err(Error::dim(op, &self.shape, &rhs.shape))
    }

    /// Layer normalization along `axis` with learnable `gamma`/`beta` of the
    /// axis extent: per position, `(x - mean) / sqrt(var + eps) * gamma + beta`
    /// with mean/var (population) taken over `axis` only.
    pub fn layer_norm(
        &self,
        axis: usize,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim("layer_norm", &self.shape, &[axis]));
        }
        let extent = self.shape[axis];
        if gamma.len() != extent {
            return Err(Error::dim("layer_norm gamma", gamma.shape(), &[extent]));
        }
        if beta.len() != extent {
            return Err(Error::dim("layer_norm beta", beta.shape(), &[extent]));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0.0f64; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut sum = 0.0;
                for j in 0..extent {
                    sum += self.data[base + j * inner];
                }
                let mean = sum / extent as f64;
                let mut var = 0.0;
                for j in 0..extent {
                    let d = self.data[base + j * inner] - mean;
                    var += d * d;
                }
                var /= extent as f64;
                let denom = (var + eps).sqrt();
                for j in 0..extent {
                    let xhat = if denom == 0.0 {
                        0.0
                    } else {
                        (self.data[base + j * inner] - mean) / denom
                    };
                    out[base + j * inner] = xhat * gamma.data[j] + beta.data[j];
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Exact bit-pattern equality (distinguishes -0.0 from 0.0, unlike `==`).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn reduce_slice(values: impl Iterator<Item = f64> + Clone, count: usize, kind: Reduction) -> f64 {
    match kind {
        Reduction::Sum => values.fold(0.0, |acc, v| acc + v),
        Reduction::Mean => values.fold(0.0, |acc, v| acc + v) / count as f64,
        Reduction::Max => values.fold(f64::NEG_INFINITY, f64::max),
        Reduction::Min => values.fold(f64::INFINITY, f64::min),
        Reduction::Std => {
            let mut rest = values.clone();
            let first = rest.next().unwrap_or(0.0);
            if rest.all(|v| v == first) {
                return 0.0;
            }
            let mean = values.clone().fold(0.0, |acc, v| acc + v) / count as f64;
            let var = values.fold(0.0, |acc, v| {
                let d = v - mean;
                acc + d * d
            }) / count as f64;
            var.sqrt()
        }
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}
