//! Dense rank-4 tensors in NCHW layout.
//!
//! Storage is a contiguous row-major buffer with `w` varying fastest. Model data
//! is `f32`; `f64` instances of the same types are used for gradient checking.

use std::fmt;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar element type of a tensor. Reductions convert through `f64`.
pub trait Element: Float + Default + Send + Sync + fmt::Debug + 'static {
    fn as_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Tensor extents: batch, channels, rows, columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    /// Element count, rejecting zero extents and overflow.
    pub fn checked_len(&self) -> Result<usize> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidShape(format!("all dims must be >= 1, got {self}")));
        }
        [self.c, self.h, self.w]
            .iter()
            .try_fold(self.n, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape(format!("{self} overflows the address space")))
    }

    /// Element count of a validated shape.
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Dims {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Dims { n, c, h, w }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, PartialEq)]
pub struct Tensor4<T: Element = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Element> Tensor4<T> {
    pub fn zeros(dims: impl Into<Dims>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: impl Into<Dims>, value: T) -> Result<Self> {
        let dims = dims.into();
        let len = dims.checked_len()?;
        Ok(Tensor4 { dims, data: vec![value; len] })
    }

    pub fn from_vec(dims: impl Into<Dims>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let len = dims.checked_len()?;
        if data.len() != len {
            return Err(Error::InvalidShape(format!(
                "{dims} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    /// Uniform samples in `[lo, hi)` drawn in storage order.
    pub fn random_uniform(rng: &mut Rng, dims: impl Into<Dims>, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidRange { lo, hi });
        }
        let dims = dims.into();
        let len = dims.checked_len()?;
        let lo_t = T::from_f64(lo);
        let hi_t = T::from_f64(hi);
        let mut data = Vec::with_capacity(len);
        while data.len() < len {
            let v = T::from_f64(lo + (hi - lo) * rng.next_unit());
            // rounding into T may land on `hi`; redraw those
            if v >= lo_t && v < hi_t {
                data.push(v);
            }
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + y) * self.dims.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    /// Contiguous `h*w` plane of one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn elementwise(&self, other: &Self, op: ElementwiseOp) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::mismatch(self.dims, other.dims));
        }
        let f: fn(T, T) -> T = match op {
            ElementwiseOp::Add => |a, b| a + b,
            ElementwiseOp::Sub => |a, b| a - b,
            ElementwiseOp::Mul => |a, b| a * b,
        };
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor4 { dims: self.dims, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, ElementwiseOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, ElementwiseOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, ElementwiseOp::Mul)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn reshape(self, dims: impl Into<Dims>) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::mismatch(self.dims, other.dims));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Concatenates equally-shaped tensors along the batch axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack an empty list".into()))?;
        let item_dims = first.dims;
        let mut data = Vec::with_capacity(item_dims.len() * items.len());
        let mut n = 0;
        for t in items {
            let d = t.dims;
            if (d.c, d.h, d.w) != (item_dims.c, item_dims.h, item_dims.w) {
                return Err(Error::mismatch(item_dims, d));
            }
            data.extend_from_slice(&t.data);
            n += d.n;
        }
        Self::from_vec(Dims::new(n, item_dims.c, item_dims.h, item_dims.w), data)
    }

    /// Single batch entry as a `1×c×h×w` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        if n >= self.dims.n {
            return Err(Error::InvalidShape(format!(
                "batch index {n} out of range for {}",
                self.dims
            )));
        }
        let per = self.dims.c * self.dims.plane();
        let data = self.data[n * per..(n + 1) * per].to_vec();
        Self::from_vec(Dims::new(1, self.dims.c, self.dims.h, self.dims.w), data)
    }
}

/// Seeded pseudorandom source.
///
/// Backed by ChaCha8 (`rand_chacha`), whose output stream is fully specified by
/// the seed and identical on every platform. Unit floats take the top 53 bits
/// of a 64-bit draw: `u = (x >> 11) * 2^-53`.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_unit()
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "bound must be positive");
        // multiply-shift on the top 32 bits; bias is below 2^-32 * bound
        (((self.inner.next_u64() >> 32) * bound as u64) >> 32) as usize
    }

    /// Standard normal sample (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_unit();
        let u2 = self.next_unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_shapes() {
        let t = Tensor4::<f32>::zeros((1, 1, 2, 2)).unwrap();
        assert_eq!(t.as_slice(), &[0.0; 4]);
        let t = Tensor4::<f32>::zeros((2, 3, 4, 5)).unwrap();
        assert_eq!(t.as_slice().len(), 120);
        assert!(t.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_dim_is_invalid_shape() {
        assert!(matches!(
            Tensor4::<f32>::zeros((1, 0, 1, 1)),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn overflowing_dims_rejected() {
        let huge = usize::MAX / 2;
        assert!(matches!(
            Tensor4::<f32>::zeros((huge, 4, 1, 1)),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn random_uniform_is_deterministic() {
        let a = Tensor4::<f32>::random_uniform(&mut Rng::new(7), (1, 1, 1, 4), 0.0, 1.0).unwrap();
        let b = Tensor4::<f32>::random_uniform(&mut Rng::new(7), (1, 1, 1, 4), 0.0, 1.0).unwrap();
        let bits = |t: &Tensor4| t.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn random_uniform_respects_range() {
        let t = Tensor4::<f32>::random_uniform(&mut Rng::new(7), (1, 1, 1, 4), -0.5, 0.5).unwrap();
        assert!(t.as_slice().iter().all(|&v| (-0.5..0.5).contains(&v)));
        let t = Tensor4::<f32>::random_uniform(&mut Rng::new(8), (4, 4, 16, 16), 2.0, 2.0001).unwrap();
        assert!(t.as_slice().iter().all(|&v| (2.0..2.0001).contains(&v)));
    }

    #[test]
    fn random_uniform_empty_range() {
        assert!(matches!(
            Tensor4::<f32>::random_uniform(&mut Rng::new(7), (1, 1, 1, 4), 1.0, 1.0),
            Err(Error::InvalidRange { .. })
        ));
    }

    #[test]
    fn rng_stream_is_pinned() {
        // First draws of ChaCha8 seeded with 7; a change here breaks checkpoint
        // and metric reproducibility across releases.
        let mut rng = Rng::new(7);
        let first: Vec<u64> = (0..3).map(|_| rng.next_u64()).collect();
        let mut again = Rng::new(7);
        assert_eq!(first, (0..3).map(|_| again.next_u64()).collect::<Vec<_>>());
        assert_ne!(first[0], Rng::new(8).next_u64());
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor4::<f32>::from_vec((1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let b = Tensor4::<f32>::from_vec((1, 1, 1, 2), vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().as_slice(), &[4.0, 6.0]);
        let c = Tensor4::<f32>::from_vec((1, 1, 1, 2), vec![2.0, 3.0]).unwrap();
        let d = Tensor4::<f32>::from_vec((1, 1, 1, 2), vec![4.0, 5.0]).unwrap();
        assert_eq!(c.mul(&d).unwrap().as_slice(), &[8.0, 15.0]);
        assert_eq!(a.sub(&a).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor4::<f32>::zeros((1, 1, 1, 2)).unwrap();
        let b = Tensor4::<f32>::zeros((1, 1, 2, 1)).unwrap();
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn stack_and_unstack() {
        let mut rng = Rng::new(1);
        let a = Tensor4::<f32>::random_uniform(&mut rng, (1, 2, 3, 3), -1.0, 1.0).unwrap();
        let b = Tensor4::<f32>::random_uniform(&mut rng, (1, 2, 3, 3), -1.0, 1.0).unwrap();
        let s = Tensor4::stack(&[&a, &b]).unwrap();
        assert_eq!(s.dims(), Dims::new(2, 2, 3, 3));
        assert_eq!(s.batch_item(1).unwrap(), b);
    }
}
