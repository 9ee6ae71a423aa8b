//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain row-major value buffer. Differentiable programs
//! are built on a [`Tape`]: leaves and operation results live in the
//! tape's arena and are addressed by [`Var`] handles. [`Tape::backward`]
//! sweeps the arena in reverse insertion order and returns
//! [`Gradients`] for every node that requires one.

mod gradcheck;
mod kernels;
mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use ops::{sigmoid_scalar, BinaryKind, NormStats};
pub use tape::{Gradients, Tape, Var};

use crate::error::{ensure, Result};
use crate::rng::Xoshiro256;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "shape {:?} holds {} elements, buffer has {}",
            shape,
            numel,
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut Xoshiro256) -> Self {
        Self::from_fn(shape, |_| std * rng.normal())
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut Xoshiro256) -> Self {
        Self::from_fn(shape, |_| rng.range_f64(lo, hi))
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(B, C, H, W)` extents of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        ensure!(
            self.shape.len() == 4,
            "expected a rank-4 tensor, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cc, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * cc + c) * h + y) * w + x]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor]) -> Result<Tensor> {
        ensure!(!parts.is_empty(), "stack_batch needs at least one tensor");
        let (_, c, h, w) = parts[0].dims4()?;
        let mut b = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            ensure!(
                (pc, ph, pw) == (c, h, w),
                "stack_batch extents differ: {:?} vs {:?}",
                p.shape,
                parts[0].shape
            );
            b += pb;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![b, c, h, w], data)
    }

    /// Batch items `[start, start + len)` of a rank-4 tensor.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        ensure!(start + len <= b, "batch slice {}..{} out of {}", start, start + len, b);
        let plane = c * h * w;
        Tensor::new(
            vec![len, c, h, w],
            self.data[start * plane..(start + len) * plane].to_vec(),
        )
    }

    /// Horizontal flip of a rank-4 tensor (width axis reversed).
    pub fn flip_w(&self) -> Result<Tensor> {
        let (_, _, _, w) = self.dims4()?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(w) {
            row.reverse();
        }
        Tensor::new(self.shape.clone(), out)
    }
}
