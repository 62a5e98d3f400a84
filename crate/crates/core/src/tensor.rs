//! Dense NCHW tensors.

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

/// A dense 4-D array in `[batch, channels, height, width]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

/// A single activation grid (batch of one) or a batch of them.
pub type FeatureMap<T = f32> = Tensor<T>;

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            Shape,
            "shape {:?} needs {} elements, got {}",
            shape,
            shape.iter().product::<usize>(),
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Single-sample tensor `[1, c, h, w]`.
    pub fn chw(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        Self::new([1, c, h, w], data)
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements per batch item.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure!(
            self.shape == other.shape,
            Shape,
            "{:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn zip_map_into<U: Scalar>(&self, other: &Self, f: impl Fn(T, T) -> U) -> Result<Tensor<U>> {
        ensure!(
            self.shape == other.shape,
            Shape,
            "{:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.value())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Copy of batch item `n` as a `[1, c, h, w]` tensor.
    pub fn sample(&self, n: usize) -> Self {
        let len = self.sample_len();
        Self {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    pub fn sample_data(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        ensure!(!items.is_empty(), Shape, "cannot stack zero tensors");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            ensure!(
                t.shape[1..] == [c, h, w],
                Shape,
                "stack: {:?} vs {:?}",
                t.shape,
                items[0].shape
            );
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(items: &[&Self]) -> Result<Self> {
        ensure!(!items.is_empty(), Shape, "cannot concatenate zero tensors");
        let [n, _, h, w] = items[0].shape;
        for t in items {
            ensure!(
                t.shape[0] == n && t.shape[2] == h && t.shape[3] == w,
                Shape,
                "concat: {:?} vs {:?}",
                t.shape,
                items[0].shape
            );
        }
        let c: usize = items.iter().map(|t| t.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for t in items {
                data.extend_from_slice(t.sample_data(b));
            }
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.value() - b.value()).abs())
            .fold(0.0, f64::max)
    }
}
