use std::fmt;
use std::sync::Arc;

use super::alloc::AllocTracker;
use super::scalar::{DType, Scalar};
use crate::error::{Error, Result};

struct Buffer<T: Scalar> {
    data: Vec<T>,
    tracker: AllocTracker,
}

impl<T: Scalar> Buffer<T> {
    fn new(data: Vec<T>) -> Self {
        let tracker = AllocTracker::current();
        tracker.charge(data.len() * std::mem::size_of::<T>());
        Buffer { data, tracker }
    }
}

impl<T: Scalar> Drop for Buffer<T> {
    fn drop(&mut self) {
        self.tracker
            .refund(self.data.len() * std::mem::size_of::<T>());
    }
}

/// Dense row-major tensor. Immutable once built; clones share the buffer.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    buf: Arc<Buffer<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("head", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Self::from_vec_unchecked(shape, data))
    }

    pub(crate) fn from_vec_unchecked(shape: &[usize], data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            buf: Arc::new(Buffer::new(data)),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_vec_unchecked(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec_unchecked(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::from_vec_unchecked(shape, (0..n).map(&mut f).collect())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.buf.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.buf.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.buf.data.clone()
    }

    /// Rows and columns of a tensor viewed as a matrix over its last dimension.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.numel() / cols, cols)
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.buf.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of {:?}", self.shape);
            flat = flat * dim + ix;
        }
        self.buf.data[flat]
    }

    /// Same buffer, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            buf: Arc::clone(&self.buf),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec_unchecked(&self.shape, self.data().iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self::from_vec_unchecked(
            &self.shape,
            self.data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data().iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data().iter().map(|&x| x * x).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data().iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }

    /// Exact equality of shape and every bit pattern.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::Contract(format!(
                "transpose2d on shape {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let src = self.data();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(src[i * c + j]);
            }
        }
        Ok(Self::from_vec_unchecked(&[c, r], out))
    }

    /// Dense 2-D product, no autodiff.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.data().as_ptr(),
                k as isize,
                1,
                other.data().as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(Self::from_vec_unchecked(&[m, n], out))
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, cols) = self.as_matrix_dims();
        &self.data()[i * cols..(i + 1) * cols]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec_unchecked(
            &self.shape,
            self.data()
                .iter()
                .map(|&x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        )
    }

    pub fn bytes(&self) -> usize {
        self.numel() * std::mem::size_of::<T>()
    }

    /// Converts into an owned vector, copying only when the buffer is shared.
    pub(crate) fn into_vec(self) -> Vec<T> {
        match Arc::try_unwrap(self.buf) {
            Ok(mut buf) => {
                let data = std::mem::take(&mut buf.data);
                // the emptied buffer refunds nothing on drop
                buf.tracker.refund(data.len() * std::mem::size_of::<T>());
                data
            }
            Err(shared) => shared.data.clone(),
        }
    }
}
