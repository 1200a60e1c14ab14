//! Elementwise activations and per-row normalizations, with the row kernels
//! and their adjoints used by the layers.

use crate::error::{ChelaError, Result};

use super::{Scalar, Tensor};

pub const RMS_EPS: f64 = 1e-6;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Silu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// d/dx silu(x) = s + x s (1 - s).
#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}

pub fn activation<T: Scalar>(kind: ActivationKind, x: &Tensor<T>) -> Result<Tensor<T>> {
    x.ensure_finite("activation input")?;
    let y = match kind {
        ActivationKind::Silu => x.map(silu),
        ActivationKind::Sigmoid => x.map(sigmoid),
    };
    y.ensure_finite("activation")?;
    Ok(y)
}

/// Cotangent of [`activation`] with respect to its input.
pub fn activation_vjp<T: Scalar>(kind: ActivationKind, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.same_shape(dy, "activation_vjp")?;
    let mut dx = Tensor::zeros_like(x);
    for ((g, &xv), &d) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        *g = d * match kind {
            ActivationKind::Silu => silu_grad(xv),
            ActivationKind::Sigmoid => {
                let s = sigmoid(xv);
                s * (T::one() - s)
            }
        };
    }
    Ok(dx)
}

/// `y_i = gain_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gain.len() {
        return Err(ChelaError::Shape(format!(
            "rms_norm: x has {} entries, gain {}",
            x.len(),
            gain.len()
        )));
    }
    if x.is_empty() {
        return Err(ChelaError::Empty("rms_norm"));
    }
    let mut y = vec![T::zero(); x.len()];
    let mut inv = [T::zero()];
    rms_norm_rows(x, gain, eps, x.len(), &mut y, &mut inv);
    finite(&y, "rms_norm")?;
    Ok(y)
}

pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(ChelaError::Shape(format!(
            "layer_norm: x {}, gain {}, bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(ChelaError::Empty("layer_norm"));
    }
    let mut y = vec![T::zero(); x.len()];
    let mut stats = [T::zero(); 2];
    layer_norm_rows(x, gain, bias, eps, x.len(), &mut y, &mut stats);
    finite(&y, "layer_norm")?;
    Ok(y)
}

fn finite<T: Scalar>(v: &[T], op: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ChelaError::NonFinite(op))
    }
}

/// RMS-normalizes each `d`-wide row of `x` into `out`, saving the inverse RMS
/// of each row in `inv_rms`.
pub fn rms_norm_rows<T: Scalar>(x: &[T], gain: &[T], eps: T, d: usize, out: &mut [T], inv_rms: &mut [T]) {
    let dn = T::of(d as f64);
    for ((row, orow), inv) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(inv_rms.iter_mut()) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let r = T::one() / (ms + eps).sqrt();
        *inv = r;
        for ((o, &v), &g) in orow.iter_mut().zip(row).zip(gain) {
            *o = g * v * r;
        }
    }
}

/// Adjoint of [`rms_norm_rows`]. Overwrites `dx`, accumulates into `dgain`.
pub fn rms_norm_rows_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv_rms: &[T],
    dy: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let dn = T::of(d as f64);
    for (((row, dyr), dxr), &r) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(inv_rms)
    {
        let mut dot = T::zero();
        for i in 0..d {
            dot += gain[i] * dyr[i] * row[i];
            dgain[i] += dyr[i] * row[i] * r;
        }
        let c = r * r * r * dot / dn;
        for i in 0..d {
            dxr[i] = r * gain[i] * dyr[i] - c * row[i];
        }
    }
}

/// Layer-normalizes each row; `stats` receives `(mean, inv_std)` pairs.
pub fn layer_norm_rows<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    d: usize,
    out: &mut [T],
    stats: &mut [T],
) {
    let dn = T::of(d as f64);
    for ((row, orow), st) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(stats.chunks_exact_mut(2)) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        st[0] = mean;
        st[1] = r;
        for i in 0..d {
            orow[i] = gain[i] * (row[i] - mean) * r + bias[i];
        }
    }
}

/// Adjoint of [`layer_norm_rows`]. Overwrites `dx`, accumulates parameter grads.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    stats: &[T],
    dy: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let dn = T::of(d as f64);
    for (((row, dyr), dxr), st) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(stats.chunks_exact(2))
    {
        let (mean, r) = (st[0], st[1]);
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for i in 0..d {
            let xh = (row[i] - mean) * r;
            let dxh = dyr[i] * gain[i];
            dgain[i] += dyr[i] * xh;
            dbias[i] += dyr[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
        }
        let m1 = sum_dxh / dn;
        let m2 = sum_dxh_xh / dn;
        for i in 0..d {
            let xh = (row[i] - mean) * r;
            dxr[i] = r * (dyr[i] * gain[i] - m1 - xh * m2);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::Rng;

    #[test]
    fn activation_fixed_points() {
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((silu(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((sigmoid(-800.0f64)).abs() < 1e-300);
        assert!((sigmoid(800.0f64) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn activation_rejects_non_finite_free_path() {
        let t = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = activation(ActivationKind::Silu, &t).unwrap();
        assert!((y.data()[2] - 2.0 * sigmoid(2.0f64)).abs() < 1e-15);
    }

    #[test]
    fn rms_norm_cases() {
        let y = rms_norm(&[2.0, 2.0, 2.0, 2.0], &[1.0; 4], 0.0).unwrap();
        assert_eq!(y, vec![1.0; 4]);
        let z = rms_norm(&[0.0; 4], &[1.0; 4], 1e-6).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        assert!(matches!(rms_norm(&[1.0; 3], &[1.0; 4], 0.0), Err(ChelaError::Shape(_))));
    }

    #[test]
    fn rms_norm_matches_compensated_oracle() {
        let mut rng = Rng::new(21);
        let x: Vec<f64> = (0..37).map(|_| rng.normal(0.0, 3.0)).collect();
        let g: Vec<f64> = (0..37).map(|_| rng.uniform_range(0.5, 1.5)).collect();
        let y = rms_norm(&x, &g, 0.0).unwrap();
        let rms = (oracle::compensated_sum(x.iter().map(|v| v * v)) / 37.0).sqrt();
        for i in 0..37 {
            let want = g[i] * x[i] / rms;
            assert!(((y[i] - want) / want).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let y = layer_norm(&[3.0; 5], &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let z = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(z, vec![1.0, -1.0]);
        assert!(layer_norm(&[1.0; 2], &[1.0; 3], &[0.0; 2], 0.0).is_err());
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = Rng::new(8);
        let x: Vec<f64> = (0..29).map(|_| rng.normal(1.0, 2.0)).collect();
        let g: Vec<f64> = (0..29).map(|_| rng.normal(1.0, 0.1)).collect();
        let b: Vec<f64> = (0..29).map(|_| rng.normal(0.0, 0.1)).collect();
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let mean = oracle::compensated_sum(x.iter().copied()) / 29.0;
        let var = oracle::compensated_sum(x.iter().map(|v| (v - mean) * (v - mean))) / 29.0;
        for i in 0..29 {
            let want = g[i] * (x[i] - mean) / (var + 1e-5).sqrt() + b[i];
            assert!(((y[i] - want) / want).abs() <= 1e-12, "{} vs {}", y[i], want);
        }
    }
}
