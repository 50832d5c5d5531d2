//! Dense row-major tensors and a small reverse-mode differentiation graph.
//!
//! Values are held as `f64` internally. A tensor tagged [`DType::F32`] rounds
//! every element to single precision at construction, so f32 tensors carry
//! exactly representable f32 values while all reductions still accumulate in
//! f64.

mod graph;
mod kernels;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{Graph, Var};
pub use kernels::{window_extent, Conv2dConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Arc<[f64]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Dimension("tensor shape must have rank >= 1".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Dimension(format!(
            "tensor extents must be >= 1, got {shape:?}"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Dimension(format!(
            "shape {shape:?} holds {n} elements but {len} values were given"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self::from_parts(shape, data, dtype))
    }

    /// Builds an f64 tensor.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data, DType::F64)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if dtype == DType::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        Tensor {
            shape,
            dtype,
            data: data.into(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v], DType::F64)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Self {
        Self::full(shape, 1.0, dtype)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n], dtype)
    }

    pub fn eye(n: usize, dtype: DType) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data, dtype)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(
        shape: &[usize],
        lo: f64,
        hi: f64,
        dtype: DType,
        rng: &mut R,
    ) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_parts(shape.to_vec(), data, dtype)
    }

    /// Standard normal samples.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], dtype: DType, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self::from_parts(shape.to_vec(), data, dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
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

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(
                ix < ext,
                "index {ix} out of bounds for axis {i} of extent {ext}"
            );
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, self.data.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: self.dtype,
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype {
            return self.clone();
        }
        Self::from_parts(self.shape.clone(), self.data.to_vec(), dtype)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.dtype,
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let [r, c] = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out, self.dtype))
    }

    pub(crate) fn dims2(&self, op: &str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::Dimension(format!(
                "{op} expects a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn dims4(&self, op: &str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::Dimension(format!(
                "{op} expects a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Encodes the values as little-endian bytes of this tensor's dtype.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.dtype.size_of());
        match self.dtype {
            DType::F32 => {
                for &v in self.data.iter() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in self.data.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_le_bytes(shape: Vec<usize>, dtype: DType, bytes: &[u8]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if bytes.len() != n * dtype.size_of() {
            return Err(Error::Dimension(format!(
                "blob of {} bytes cannot hold {n} {dtype} values",
                bytes.len()
            )));
        }
        let data = match dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Tensor::new(shape, data, dtype)
    }
}

/// Matrix product of `[b, m]` and `[m, n]` with f64 accumulation.
pub fn matmul(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    kernels::matmul(a, w)
}

pub fn conv2d(x: &Tensor, k: &Tensor, cfg: Conv2dConfig) -> Result<Tensor> {
    kernels::conv2d_forward(x, k, cfg)
}

/// Collapses every axis after the first, keeping the sample axis.
pub fn flatten_features(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::Dimension(format!(
            "flatten_features needs rank >= 2, got shape {:?}",
            x.shape()
        )));
    }
    let b = x.shape()[0];
    x.reshape(&[b, x.len() / b])
}

/// Row-wise softmax of a `[b, n]` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [b, n] = logits.dims2("softmax")?;
    let mut out = vec![0.0; b * n];
    for r in 0..b {
        let row = &logits.data()[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in &mut out[r * n..(r + 1) * n] {
            *o /= z;
        }
    }
    Tensor::new(vec![b, n], out, logits.dtype())
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let [b, n] = logits.dims2("argmax")?;
    Ok((0..b)
        .map(|r| {
            let row = &logits.data()[r * n..(r + 1) * n];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}
