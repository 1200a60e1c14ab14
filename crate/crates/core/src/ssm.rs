//! Reference linear state-space stack: HiPPO initialization, bilinear
//! discretization, kernel materialization and the sequential scan that
//! serves as the oracle for the convolutional evaluation.
//!
//! Matrices are row-major `Vec<f64>`; nalgebra handles the dense solves and
//! eigenvalues.

use nalgebra::DMatrix;

use crate::conv::{causal_conv_fft, depthwise_fft, depthwise_fft_backward};
use crate::error::{ChelaError, Result};
use crate::numerics::{gemm, MatRef, Rng, Tensor};

pub const DEFAULT_DELTA: f64 = 0.01;
const MAX_CONDITION: f64 = 1e12;

/// `x' = A x + B u, y = C x` with step size `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    pub state_dim: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub state_dim: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c_bar: Vec<f64>,
}

/// Structured part `A^(n)` before the low-rank correction:
/// `-sqrt((i+1/2)(j+1/2))` below the diagonal, `-1/2` on it, and
/// `+sqrt((i+1/2)(j+1/2))` above.
pub fn hippo_structured(n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let s = ((i as f64 + 0.5) * (j as f64 + 0.5)).sqrt();
            a[i * n + j] = match i.cmp(&j) {
                std::cmp::Ordering::Greater => -s,
                std::cmp::Ordering::Equal => -0.5,
                std::cmp::Ordering::Less => s,
            };
        }
    }
    a
}

/// `P_i = (i + 1/2)^{1/2}`.
pub fn hippo_p(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5).sqrt()).collect()
}

/// `A = A^(n) - P P^T`, `B_i = (2i + 1)^{1/2}`, `C ~ normal(0, 1)`.
pub fn hippo_s4_init(state_dim: usize, delta: f64, rng: &mut Rng) -> Result<ContinuousSsm> {
    if state_dim == 0 {
        return Err(ChelaError::InvalidArgument("state dimension must be positive".into()));
    }
    if !(delta > 0.0) {
        return Err(ChelaError::InvalidArgument(format!("step size must be positive, got {delta}")));
    }
    let n = state_dim;
    let mut a = hippo_structured(n);
    let p = hippo_p(n);
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] -= p[i] * p[j];
        }
    }
    let b = (0..n).map(|i| (2.0 * i as f64 + 1.0).sqrt()).collect();
    let c = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
    Ok(ContinuousSsm {
        state_dim: n,
        a,
        b,
        c,
        delta,
    })
}

fn to_matrix(v: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, v)
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `A_bar = (I - D/2 A)^{-1} (I + D/2 A)`, `B_bar = (I - D/2 A)^{-1} D B`,
/// `C_bar = C`.
pub fn bilinear_discretize(ssm: &ContinuousSsm) -> Result<DiscreteSsm> {
    let n = ssm.state_dim;
    if ssm.a.len() != n * n || ssm.b.len() != n || ssm.c.len() != n {
        return Err(ChelaError::Shape(format!("ssm with state dimension {n} has inconsistent A/B/C")));
    }
    let a = to_matrix(&ssm.a, n);
    let half = ssm.delta / 2.0;
    let eye = DMatrix::<f64>::identity(n, n);
    let lhs = &eye - &a * half;
    let rhs = &eye + &a * half;
    let condition = condition_number(&lhs);
    if !(condition < MAX_CONDITION) {
        return Err(ChelaError::Singular { condition });
    }
    let lu = lhs.lu();
    let a_bar = lu.solve(&rhs).ok_or(ChelaError::Singular { condition })?;
    let db = nalgebra::DVector::from_iterator(n, ssm.b.iter().map(|v| v * ssm.delta));
    let b_bar = lu.solve(&db).ok_or(ChelaError::Singular { condition })?;
    let mut a_rows = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            a_rows.push(a_bar[(i, j)]);
        }
    }
    Ok(DiscreteSsm {
        state_dim: n,
        a_bar: a_rows,
        b_bar: b_bar.iter().copied().collect(),
        c_bar: ssm.c.clone(),
    })
}

/// Largest eigenvalue modulus of `A_bar`.
pub fn spectral_radius(d: &DiscreteSsm) -> f64 {
    let m = to_matrix(&d.a_bar, d.state_dim);
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn mat_vec(a: &[f64], x: &[f64], n: usize, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = a[i * n..(i + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

/// Rows `A_bar^t B_bar` for `t < len`, as a `[len, n]` row-major buffer.
pub fn kernel_basis(d: &DiscreteSsm, len: usize) -> Vec<f64> {
    let n = d.state_dim;
    let mut basis = vec![0.0; len * n];
    let mut x = d.b_bar.clone();
    let mut next = vec![0.0; n];
    for t in 0..len {
        basis[t * n..(t + 1) * n].copy_from_slice(&x);
        mat_vec(&d.a_bar, &x, n, &mut next);
        std::mem::swap(&mut x, &mut next);
    }
    basis
}

/// `k_t = C_bar A_bar^t B_bar` by iterated state propagation.
pub fn materialize_kernel(d: &DiscreteSsm, len: usize) -> Vec<f64> {
    let n = d.state_dim;
    let basis = kernel_basis(d, len);
    (0..len)
        .map(|t| basis[t * n..(t + 1) * n].iter().zip(&d.c_bar).map(|(x, c)| x * c).sum())
        .collect()
}

/// `x_k = A_bar x_{k-1} + B_bar u_k`, `y_k = C_bar x_k`, from `x_{-1} = 0`.
pub fn recurrent_scan(d: &DiscreteSsm, u: &[f64]) -> Vec<f64> {
    let n = d.state_dim;
    let mut x = vec![0.0; n];
    let mut next = vec![0.0; n];
    u.iter()
        .map(|&uk| {
            mat_vec(&d.a_bar, &x, n, &mut next);
            for (xi, (&ni, &bi)) in x.iter_mut().zip(next.iter().zip(&d.b_bar)) {
                *xi = ni + bi * uk;
            }
            x.iter().zip(&d.c_bar).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Convolutional evaluation: materialized kernel applied by FFT.
pub fn ssm_forward(d: &DiscreteSsm, u: &[f64]) -> Result<Vec<f64>> {
    if u.is_empty() {
        return Err(ChelaError::Empty("ssm_forward"));
    }
    let k = materialize_kernel(d, u.len());
    causal_conv_fft(&k, u)
}

/// Depthwise SSM token mixer: shared HiPPO `A`, `B` and step size, one
/// learnable read-out `C` per channel. Only `c` is a trained parameter; the
/// basis is rebuilt from the configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmMixer {
    /// `[channels, state_dim]`
    pub c: Tensor,
    /// `[max_len, state_dim]`, rows `A_bar^t B_bar`
    basis: Tensor,
}

impl SsmMixer {
    pub fn init(channels: usize, state_dim: usize, delta: f64, max_len: usize, rng: &mut Rng) -> Result<Self> {
        let cont = hippo_s4_init(state_dim, delta, rng)?;
        let disc = bilinear_discretize(&cont)?;
        let basis = Tensor::from_vec(&[max_len, state_dim], kernel_basis(&disc, max_len))?;
        let c = (0..channels * state_dim).map(|_| rng.normal(0.0, 1.0 / (state_dim as f64).sqrt())).collect();
        Ok(Self {
            c: Tensor::from_vec(&[channels, state_dim], c)?,
            basis,
        })
    }

    /// Rebuilds the fixed basis around an existing read-out (checkpoint load).
    pub fn with_readout(c: Tensor, delta: f64, max_len: usize) -> Result<Self> {
        let state_dim = c.shape()[1];
        let mut scratch = Rng::new(0);
        let disc = bilinear_discretize(&hippo_s4_init(state_dim, delta, &mut scratch)?)?;
        let basis = Tensor::from_vec(&[max_len, state_dim], kernel_basis(&disc, max_len))?;
        Ok(Self { c, basis })
    }

    pub fn max_len(&self) -> usize {
        self.basis.shape()[0]
    }

    /// Per-channel kernels `[channels, len]`.
    pub fn kernels(&self, len: usize) -> Tensor {
        let (ch, n) = (self.c.shape()[0], self.c.shape()[1]);
        let mut k = Tensor::zeros(&[ch, len]);
        gemm(
            1.0,
            MatRef::new(self.c.data(), ch, n),
            MatRef::new(&self.basis.data()[..len * n], len, n).t(),
            0.0,
            k.data_mut(),
            len,
        );
        k
    }

    /// Channel-major forward.
    pub fn forward_cm(&self, x_cm: &[f64], b: usize, len: usize) -> Result<Vec<f64>> {
        if len > self.max_len() {
            return Err(ChelaError::LengthExceeded { len, max: self.max_len() });
        }
        depthwise_fft(&self.kernels(len), x_cm, b, len)
    }

    /// `(dx_cm, dC)`.
    pub fn backward_cm(&self, x_cm: &[f64], g_cm: &[f64], b: usize, len: usize) -> Result<(Vec<f64>, Tensor)> {
        let kernels = self.kernels(len);
        let (dx, dk) = depthwise_fft_backward(&kernels, x_cm, g_cm, b, len)?;
        let (ch, n) = (self.c.shape()[0], self.c.shape()[1]);
        let mut dc = Tensor::zeros(&[ch, n]);
        gemm(
            1.0,
            MatRef::new(dk.data(), ch, len),
            MatRef::new(&self.basis.data()[..len * n], len, n),
            0.0,
            dc.data_mut(),
            n,
        );
        Ok((dx, dc))
    }
}
