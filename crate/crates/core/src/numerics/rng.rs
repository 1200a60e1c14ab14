//! Platform-independent pseudo-random numbers.
//!
//! The stream is splitmix64. Uniforms take the top 53 bits of a draw, scaled
//! by `2^-53`, giving values in `[0, 1)`. Normals use the cosine branch of
//! Box-Muller on two uniforms (`u1` is shifted into `(0, 1]`), so each
//! normal consumes exactly two draws and the full generator state is the
//! single `u64` counter.

use crate::error::{ChelaError, Result};

use super::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Restores a generator from [`Rng::state`].
    pub fn from_state(state: u64) -> Self {
        Self { state }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    /// Independent stream derived from this one's current state and a tag.
    pub fn fork(&self, tag: u64) -> Self {
        let mut r = Rng::new(self.state ^ tag.wrapping_mul(GOLDEN_GAMMA));
        r.next_u64();
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + std * r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// `k` distinct values from `0..n` in random order.
    pub fn distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

/// Fills a fresh tensor from `dist`, advancing `rng`.
pub fn prng_fill(rng: &mut Rng, shape: &[usize], dist: Distribution) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = match dist {
        Distribution::Uniform { lo, hi } => {
            if !(lo.is_finite() && hi.is_finite()) || hi < lo {
                return Err(ChelaError::InvalidArgument(format!(
                    "uniform bounds [{lo}, {hi})"
                )));
            }
            (0..n).map(|_| rng.uniform_range(lo, hi)).collect()
        }
        Distribution::Normal { mean, std } => {
            if std < 0.0 || !std.is_finite() || !mean.is_finite() {
                return Err(ChelaError::InvalidArgument(format!(
                    "normal with sigma {std}"
                )));
            }
            (0..n).map(|_| rng.normal(mean, std)).collect()
        }
    };
    Tensor::from_vec(shape, data)
}
