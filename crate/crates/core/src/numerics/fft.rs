//! Iterative radix-2 FFT.
//!
//! Forward transform uses the `exp(-2*pi*i*jk/N)` kernel; the inverse applies
//! the `1/N` scale. Inputs whose length is not a power of two are zero-padded
//! by [`fft`]; convolution wrappers are responsible for truncating back.

use num_complex::{Complex, Complex64};

use crate::error::{ChelaError, Result};

use super::Scalar;

/// Precomputed twiddles and bit-reversal permutation for one power-of-two size.
#[derive(Clone, Debug)]
pub struct FftPlan<T> {
    n: usize,
    /// Twiddles of every butterfly stage laid end to end: `size / 2` entries
    /// for `size = 2, 4, .., n`.
    stages: Vec<Complex<T>>,
    bitrev: Vec<usize>,
}

impl<T: Scalar> FftPlan<T> {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(ChelaError::Empty("fft"));
        }
        if !n.is_power_of_two() {
            return Err(ChelaError::InvalidArgument(format!(
                "fft plan size {n} is not a power of two"
            )));
        }
        // twiddles are evaluated in f64 so that f32 plans are correctly rounded
        let twiddle = |k: usize| {
            let theta = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            Complex::new(T::of(theta.cos()), T::of(theta.sin()))
        };
        let mut stages = Vec::with_capacity(n.saturating_sub(1));
        let mut size = 2;
        while size <= n {
            stages.extend((0..size / 2).map(|j| twiddle(j * (n / size))));
            size *= 2;
        }
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Ok(Self { n, stages, bitrev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place transform of a buffer of exactly `len()` elements. The
    /// inverse conjugates around the forward pass and scales by `1/N`.
    pub fn process(&self, buf: &mut [Complex<T>], inverse: bool) {
        let n = self.n;
        assert_eq!(buf.len(), n, "fft buffer length must equal plan size");
        if inverse {
            for v in buf.iter_mut() {
                v.im = -v.im;
            }
        }
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut size = 2;
        let mut offset = 0;
        while size <= n {
            let half = size / 2;
            let tw = &self.stages[offset..offset + half];
            for block in buf.chunks_exact_mut(size) {
                let (lo, hi) = block.split_at_mut(half);
                for ((a, b), w) in lo.iter_mut().zip(hi.iter_mut()).zip(tw) {
                    let t = *b * *w;
                    let u = *a;
                    *a = u + t;
                    *b = u - t;
                }
            }
            offset += half;
            size *= 2;
        }
        if inverse {
            let scale = T::one() / T::of(n as f64);
            for v in buf.iter_mut() {
                v.re = v.re * scale;
                v.im = -v.im * scale;
            }
        }
    }
}

/// Transform of `x` zero-padded to the next power of two. The result has the
/// padded length.
pub fn fft(x: &[Complex64], inverse: bool) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(ChelaError::Empty("fft"));
    }
    let n = x.len().next_power_of_two();
    let plan = FftPlan::<f64>::new(n)?;
    let mut buf = x.to_vec();
    buf.resize(n, Complex64::new(0.0, 0.0));
    plan.process(&mut buf, inverse);
    Ok(buf)
}
