use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::element::Element;
use super::tensor::Tensor;
use crate::error::Result;

/// Seedable counter-mode generator (ChaCha8). All parameter initialization
/// and synthetic data flow through it.
#[derive(Clone, Debug)]
pub struct CounterRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `label`; identical for identical
    /// (seed, label) no matter how much of the parent has been consumed.
    pub fn stream(&self, label: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(fnv1a(label));
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform<T: Element>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(lo + (hi - lo) * self.uniform_f64()))
            .collect();
        Tensor::from_vec(shape.to_vec(), data)
    }

    pub fn normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Result<Tensor<T>> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(std * self.standard_normal())).collect();
        Tensor::from_vec(shape.to_vec(), data)
    }

    /// Normal samples redrawn until they fall within two standard deviations.
    pub fn trunc_normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Result<Tensor<T>> {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z = self.standard_normal();
            if z.abs() <= 2.0 {
                data.push(T::from_f64_lossy(std * z));
            }
        }
        Tensor::from_vec(shape.to_vec(), data)
    }
}
