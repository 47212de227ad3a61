use std::fmt;
use std::sync::Arc;

use super::element::Element;
use super::meter;
use crate::error::{Error, Result};

/// Metered buffer. Bytes are charged on creation and released on drop.
struct Storage<T: Element> {
    data: Vec<T>,
}

impl<T: Element> Storage<T> {
    fn new(data: Vec<T>) -> Result<Self> {
        meter::acquire(data.len() * std::mem::size_of::<T>())?;
        Ok(Self { data })
    }
}

impl<T: Element> Drop for Storage<T> {
    fn drop(&mut self) {
        meter::release(self.data.len() * std::mem::size_of::<T>());
    }
}

/// Dense row-major tensor.
///
/// Buffers are reference counted, so `clone` and [`Tensor::reshape`] share
/// storage and cost no allocation.
#[derive(Clone)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    storage: Arc<Storage<T>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensors need at least one axis"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            storage: Arc::new(Storage::new(data)?),
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n = numel_of(&shape);
        Self::from_vec(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::from_vec(vec![1], vec![value])
    }

    /// Converts a slice of `f64` into a tensor of any element type.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::from_vec(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.storage.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.storage.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.storage.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.storage.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            flat = flat * ext + ix;
        }
        self.storage.data[flat]
    }

    /// Same buffer viewed under a new shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel_of(&shape) != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            storage: Arc::clone(&self.storage),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::from_vec(self.shape.clone(), self.data().iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Element>(&self) -> Result<Tensor<U>> {
        Tensor::from_vec(
            self.shape.clone(),
            self.data().iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data().iter().map(|v| v.as_f64()).sum()
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data().iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}
