use std::sync::Arc;

use crate::error::TensorError;
use crate::scalar::Scalar;

/// Dense row-major tensor with shared, copy-on-write storage.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Like [`Tensor::new`] but panics on a length mismatch.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        Self::new(shape, data).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, (0..numel).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; clones the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Shape as `(batch, channels, d, h, w)`; panics on other ranks.
    pub fn dims5(&self) -> [usize; 5] {
        match self.shape[..] {
            [b, c, d, h, w] => [b, c, d, h, w],
            _ => panic!("expected a rank-5 tensor, got shape {:?}", self.shape),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn item(&self) -> T {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self::from_vec(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.numel()).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(
            &self.shape,
            self.data
                .iter()
                .map(|&x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        )
    }

    /// Concatenates rank-5 tensors along the batch axis.
    pub fn cat_batch(parts: &[Tensor<T>]) -> Self {
        assert!(!parts.is_empty(), "cat_batch of nothing");
        let [_, c, d, h, w] = parts[0].dims5();
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            let [pb, pc, pd, ph, pw] = p.dims5();
            assert_eq!([pc, pd, ph, pw], [c, d, h, w], "cat_batch shape mismatch");
            b += pb;
            data.extend_from_slice(p.data());
        }
        Self::from_vec(&[b, c, d, h, w], data)
    }

    /// Slice `[start, start + len)` along the batch axis of a rank-5 tensor.
    pub fn batch_slice(&self, start: usize, len: usize) -> Self {
        let [b, c, d, h, w] = self.dims5();
        assert!(start + len <= b, "batch slice out of range");
        let per = c * d * h * w;
        Self::from_vec(
            &[len, c, d, h, w],
            self.data[start * per..(start + len) * per].to_vec(),
        )
    }
}
