//! Dense 4-D activation container (batch, channels, height, width).

use serde::{Deserialize, Serialize};

use crate::nn::NetError;

/// Per-sample shape: channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Row-major `n × c × h × w` tensor of 32-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    n: usize,
    shape: Shape3,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(n: usize, shape: Shape3) -> Self {
        Self { n, shape, data: vec![0.0; n * shape.len()] }
    }

    pub fn filled(n: usize, shape: Shape3, value: f32) -> Self {
        Self { n, shape, data: vec![value; n * shape.len()] }
    }

    /// Wraps `data`; fails when the length does not match or a value is not finite.
    pub fn from_vec(n: usize, shape: Shape3, data: Vec<f32>) -> Result<Self, NetError> {
        if data.len() != n * shape.len() {
            return Err(NetError::ShapeMismatch(format!(
                "{} values cannot fill {} samples of {}",
                data.len(),
                n,
                shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite);
        }
        Ok(Self { n, shape, data })
    }

    /// Stacks single samples (each `1 × shape`) into one batch.
    pub fn stack(samples: &[&Tensor4]) -> Result<Self, NetError> {
        let first = samples.first().ok_or_else(|| NetError::ShapeMismatch("empty batch".into()))?;
        let shape = first.shape;
        let mut data = Vec::with_capacity(samples.len() * shape.len());
        let mut n = 0;
        for s in samples {
            if s.shape != shape {
                return Err(NetError::ShapeMismatch(format!("cannot stack {} with {}", s.shape, shape)));
            }
            data.extend_from_slice(&s.data);
            n += s.n;
        }
        Ok(Self { n, shape, data })
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.shape.c, self.shape.h, self.shape.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// Values of sample `n`.
    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.shape.len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.shape.len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copies sample `n` out as a batch of one.
    pub fn select(&self, n: usize) -> Tensor4 {
        Tensor4 { n: 1, shape: self.shape, data: self.sample(n).to_vec() }
    }

    /// Gathers the listed samples into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Tensor4 {
        let mut data = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4 { n: indices.len(), shape: self.shape, data }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 { n: self.n, shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
