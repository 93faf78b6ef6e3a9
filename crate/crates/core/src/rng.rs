//! Seeded, portable random streams and the two activation-shaped samplers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Result, TealError};
use crate::scalar::Scalar;
use crate::tensor::Vector;

/// ChaCha8 keyed by `seed`, positioned on counter stream `stream`.
///
/// The output sequence depends only on `(seed, stream)`. Parallel consumers
/// take independent children via [`RngStream::split`] rather than sharing one
/// stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream `index`; does not advance `self`.
    pub fn split(&self, index: u64) -> RngStream {
        let key = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x5151)));
        RngStream::with_stream(key, index)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Laplace(0, 1): a unit exponential with a random sign.
    pub fn standard_laplace(&mut self) -> f64 {
        let e: f64 = self.inner.sample(Exp1);
        if self.inner.next_u32() & 1 == 0 {
            e
        } else {
            -e
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

fn check_scale(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(TealError::InvalidArgument(format!(
            "{name} must be positive and finite, got {v}"
        )));
    }
    Ok(())
}

/// `n` i.i.d. draws from N(0, sigma²). The stream for `sigma = a` is exactly
/// `a` times the stream for `sigma = 1` under the same seed.
pub fn sample_gaussian<T: Scalar>(rng: &mut RngStream, n: usize, sigma: f64) -> Result<Vector<T>> {
    check_scale("sigma", sigma)?;
    if n == 0 {
        return Err(TealError::InvalidArgument("sample count must be >= 1".into()));
    }
    Ok((0..n)
        .map(|_| T::lit(rng.standard_normal() * sigma))
        .collect::<Vec<_>>()
        .into())
}

/// `n` i.i.d. draws from Laplace(0, scale).
pub fn sample_laplace<T: Scalar>(rng: &mut RngStream, n: usize, scale: f64) -> Result<Vector<T>> {
    check_scale("scale", scale)?;
    if n == 0 {
        return Err(TealError::InvalidArgument("sample count must be >= 1".into()));
    }
    Ok((0..n)
        .map(|_| T::lit(rng.standard_laplace() * scale))
        .collect::<Vec<_>>()
        .into())
}

/// Fills `out` with N(0, sigma²) draws; no validation, used on hot paths.
pub(crate) fn fill_gaussian<T: Scalar>(rng: &mut RngStream, sigma: f64, out: &mut [T]) {
    for v in out {
        *v = T::lit(rng.standard_normal() * sigma);
    }
}
