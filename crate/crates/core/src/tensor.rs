//! Minimal dense tensor: row-major storage, rank 1 to 4, generic over
//! [`Scalar`].
//!
//! This is deliberately not an ndarray replacement. The crate only ever
//! needs C-contiguous arrays with known small ranks (vectors, `C x H x W`
//! feature maps, `O x I x K x K` convolution kernels), so the type keeps a
//! `Vec<usize>` shape and exposes checked constructors plus a handful of
//! inlined accessors for the hot paths.

use crate::error::{FloweError, Result};
use crate::scalar::Scalar;

/// Dense row-major array with rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    /// Constant tensor of the given shape.
    pub fn filled(shape: &[usize], value: S) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= 4 && shape.iter().all(|&d| d > 0),
            "tensor shape must have rank 1-4 with positive dims, got {shape:?}"
        );
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Build from existing data; checks length and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 || shape.iter().any(|&d| d == 0) {
            return Err(FloweError::dim(
                "tensor::from_vec",
                format!("shape must have rank 1-4 with positive dims, got {shape:?}"),
            ));
        }
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(FloweError::dim(
                "tensor::from_vec",
                format!("shape {shape:?} needs {want} values, got {}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FloweError::Data(format!(
                "non-finite tensor value at flat index {pos}"
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rank-3 tensor filled from a function of `(channel, y, x)`.
    pub fn from_fn3(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Tensor {
            shape: vec![c, h, w],
            data,
        }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Dimensions of a rank-3 tensor as `(channels, height, width)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(FloweError::dim(
                "tensor::dims3",
                format!("expected rank 3, got shape {:?}", self.shape),
            )),
        }
    }

    /// Dimensions of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(FloweError::dim(
                "tensor::dims4",
                format!("expected rank 4, got shape {:?}", self.shape),
            )),
        }
    }

    /// One `H x W` plane of a rank-3 tensor.
    #[inline]
    pub fn plane(&self, c: usize) -> &[S] {
        let (nc, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        debug_assert!(self.rank() == 3 && c < nc);
        &self.data[c * h * w..(c + 1) * h * w]
    }

    /// Mutable `H x W` plane of a rank-3 tensor.
    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [S] {
        let (nc, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        debug_assert!(self.shape.len() == 3 && c < nc);
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    /// Element of a rank-3 tensor.
    #[inline(always)]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> S {
        debug_assert!(self.rank() == 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        debug_assert!(c < self.shape[0] && y < h && x < w);
        self.data[(c * h + y) * w + x]
    }

    /// Set an element of a rank-3 tensor.
    #[inline(always)]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: S) {
        debug_assert!(self.rank() == 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        debug_assert!(c < self.shape[0] && y < h && x < w);
        self.data[(c * h + y) * w + x] = v;
    }

    /// Element of a rank-4 tensor.
    #[inline(always)]
    pub fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> S {
        debug_assert!(self.rank() == 4);
        let (db, dc, dd) = (self.shape[1], self.shape[2], self.shape[3]);
        debug_assert!(a < self.shape[0] && b < db && c < dc && d < dd);
        self.data[((a * db + b) * dc + c) * dd + d]
    }

    /// Apply a function elementwise, returning a new tensor.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`, elementwise. Shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor<S>, alpha: S) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + alpha * b;
        }
    }

    /// Sum of squares, accumulated in f64 for a deterministic, precision-
    /// stable reduction.
    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|v| {
            let x = v.as_f64();
            x * x
        }).sum()
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert to another scalar type (used between test precision and the
    /// training precision).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }
}
