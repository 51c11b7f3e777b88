use crate::error::{ensure, Result};
use crate::scalar::{gemm, MatRef, Real};

/// Dense row-major array.
///
/// Most of the crate treats tensors as matrices: `rows()` is the leading
/// extent and `cols()` the product of the remaining extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            "shape {:?} holds {} values but {} were given",
            shape,
            n,
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect() }
    }

    /// Builds from `f64` values, converting to the element type.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.rows() == 0 {
            0
        } else {
            self.data.len() / self.rows()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        ensure!(
            shape.iter().product::<usize>() == self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn as_mat(&self) -> MatRef<'_, T> {
        MatRef::new(&self.data, self.rows(), self.cols())
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        ensure!(
            self.cols() == other.rows(),
            "matmul of {:?} by {:?}",
            self.shape,
            other.shape
        );
        let mut out = Tensor::zeros([self.rows(), other.cols()]);
        gemm(self.as_mat(), other.as_mat(), T::zero(), &mut out.data);
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor<T> {
        let (r, c) = (self.rows(), self.cols());
        Tensor::from_fn([c, r], |i| self.data[(i % r) * c + i / r])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            T::zero()
        } else {
            self.sum() / T::lit(self.data.len() as f64)
        }
    }

    /// Population standard deviation over every element.
    pub fn std(&self) -> T {
        let m = self.mean();
        let n = T::lit(self.data.len().max(1) as f64);
        (self.data.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / n).sqrt()
    }

    /// Mean squared difference against a same-sized tensor.
    pub fn mse(&self, other: &Tensor<T>) -> Result<T> {
        ensure!(
            self.data.len() == other.data.len(),
            "mse between {:?} and {:?}",
            self.shape,
            other.shape
        );
        if self.data.is_empty() {
            return Ok(T::zero());
        }
        let s: T = self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(s / T::lit(self.data.len() as f64))
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign length");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Converts every element to another scalar width.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.as_f64()).collect()
    }

    /// Contiguous row range `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor<T> {
        let c = self.cols();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor { shape, data: self.data[start * c..(start + len) * c].to_vec() }
    }
}
