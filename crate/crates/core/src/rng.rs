//! Seeded randomness. Every random draw in the engine goes through [`Rng`],
//! a PCG-64 stream; the same seed yields the same stream on every platform.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

/// Single-owner random stream. Not `Clone`: hand it off, never share it.
#[derive(Debug)]
pub struct Rng {
    inner: Pcg64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Pcg64::seed_from_u64(seed),
        }
    }

    /// An independent stream derived from `(seed, stream)`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self::new(splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5eed))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Gaussian samples drawn in `f64` and rounded into `T`, so `f32` and
    /// `f64` runs start from the same values up to rounding.
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor<T>> {
        if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "normal(mean={mean}, std={std})"
            )));
        }
        let data = (0..numel(shape))
            .map(|_| T::of(mean + std * self.standard_normal()))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("uniform(lo={lo}, hi={hi})")));
        }
        let data = (0..numel(shape))
            .map(|_| T::of(lo + (hi - lo) * self.next_f64()))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.inner);
        idx
    }
}
