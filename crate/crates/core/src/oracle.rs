//! Independent reference computations.
//!
//! Nothing here shares a code path with the production kernels: sums are
//! compensated (Neumaier with error-free products), transforms are naive
//! O(N^2), attention is formed as dense L x L matrices and SSM kernels use
//! explicit matrix powers. Used by the unit tests, the acceptance suite and
//! the `verify` command.

use num_complex::Complex64;

use crate::numerics::Tensor;

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Dot product carried in double-double precision (error-free products via
/// fused multiply-add, compensated accumulation).
pub fn compensated_dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut terms = Vec::with_capacity(2 * a.len());
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        terms.push(p);
        terms.push(x.mul_add(y, -p));
    }
    compensated_sum(terms)
}

/// `X_k = sum_n x_n exp(-2 pi i n k / N)` by direct summation.
pub fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let mut re = Vec::with_capacity(n);
            let mut im = Vec::with_capacity(n);
            for (j, v) in x.iter().enumerate() {
                // reduce the index product first so the angle stays accurate
                let theta = -2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
                let w = Complex64::new(theta.cos(), theta.sin());
                let p = v * w;
                re.push(p.re);
                im.push(p.im);
            }
            Complex64::new(compensated_sum(re), compensated_sum(im))
        })
        .collect()
}

/// `y_t = sum_{j <= min(t, k-1)} kernel_j x_{t-j}` with compensated sums.
pub fn causal_conv(kernel: &[f64], x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            let taps = kernel.len().min(t + 1);
            let k: Vec<f64> = kernel[..taps].to_vec();
            let xs: Vec<f64> = (0..taps).map(|j| x[t - j]).collect();
            compensated_dot(&k, &xs)
        })
        .collect()
}

fn row(m: &[f64], i: usize, d: usize) -> &[f64] {
    &m[i * d..(i + 1) * d]
}

fn column(m: &[f64], j: usize, rows: usize, d: usize) -> Vec<f64> {
    (0..rows).map(|i| m[i * d + j]).collect()
}

/// Token-wise RMS normalization with explicit gain.
pub fn rms_rows(o: &[f64], gain: &[f64], eps: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; o.len()];
    for (r, orow) in o.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = compensated_sum(r.iter().map(|v| v * v)) / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for i in 0..d {
            orow[i] = gain[i] * r[i] * inv;
        }
    }
    out
}

/// Which score entries `(t, s)` the dense oracle keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    Full,
    LowerInclusive,
}

impl Mask {
    fn keep(self, t: usize, s: usize) -> bool {
        match self {
            Mask::Full => true,
            Mask::LowerInclusive => s <= t,
        }
    }
}

/// Left-product linear attention for one sequence: `Norm((Q K^T ⊙ M) V)`.
pub fn dense_linear_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    len: usize,
    d: usize,
    mask: Mask,
    gain: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut scores = vec![0.0; len * len];
    for t in 0..len {
        for s in 0..len {
            if mask.keep(t, s) {
                scores[t * len + s] = compensated_dot(row(q, t, d), row(k, s, d));
            }
        }
    }
    let mut o = vec![0.0; len * d];
    for t in 0..len {
        for j in 0..d {
            o[t * d + j] = compensated_dot(row(&scores, t, len), &column(v, j, len, d));
        }
    }
    rms_rows(&o, gain, eps, d)
}

/// Dense softmax attention `softmax(Q K^T / sqrt(d)) V` for one sequence.
pub fn dense_softmax_attention(q: &[f64], k: &[f64], v: &[f64], len: usize, d: usize, causal: bool) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        let allowed = if causal { t + 1 } else { len };
        let scores: Vec<f64> = (0..allowed)
            .map(|s| compensated_dot(row(q, t, d), row(k, s, d)) * scale)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z = compensated_sum(e.iter().copied());
        let p: Vec<f64> = e.iter().map(|x| x / z).collect();
        for j in 0..d {
            let vc: Vec<f64> = (0..allowed).map(|s| v[s * d + j]).collect();
            out[t * d + j] = compensated_dot(&p, &vc);
        }
    }
    out
}

/// Row-major square matrix product.
pub fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = compensated_dot(row(a, i, n), &column(b, j, n, n));
        }
    }
    c
}

/// `c^T A^t b` through an explicitly formed matrix power.
pub fn ssm_kernel_entry(a: &[f64], b: &[f64], c: &[f64], n: usize, t: usize) -> f64 {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        p[i * n + i] = 1.0;
    }
    for _ in 0..t {
        p = mat_mul(&p, a, n);
    }
    let pb: Vec<f64> = (0..n).map(|i| compensated_dot(row(&p, i, n), b)).collect();
    compensated_dot(c, &pb)
}

/// Spectral radius estimate `|A^k x|^(1/k)` (Gelfand) with renormalization.
pub fn spectral_radius_power(a: &[f64], n: usize, iters: usize) -> f64 {
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * i as f64).collect();
    let mut log_growth = 0.0;
    for _ in 0..iters {
        let y: Vec<f64> = (0..n).map(|i| compensated_dot(row(a, i, n), &x)).collect();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        log_growth += norm.ln();
        x = y.iter().map(|v| v / norm).collect();
    }
    (log_growth / iters as f64).exp()
}

/// Max-norm relative error `|a - b|_inf / |b|_inf`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err length mismatch");
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn rel_err_tensor(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    rel_err(a.data(), b.data())
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line evaluation of the gated layer for convolutional mixers:
/// direct convolutions for both short branches and the long kernel, dense
/// causal attention, compensated sums throughout.
pub fn chela_layer_dense(p: &crate::layer::ChelaLayerParams, x: &Tensor) -> Vec<f64> {
    use crate::layer::Mixer;
    let conv = match &p.mixer {
        Mixer::ShortLong(c) | Mixer::LongConv(c) => c,
        Mixer::Ssm(_) => panic!("dense transcription covers convolutional mixers"),
    };
    let (b, l, d) = x.dims3();
    let kv = conv.bank.kvar.shape()[1];
    let lmax = conv.long_kernel.shape()[1];
    let mut out = vec![0.0; b * l * d];
    for bi in 0..b {
        let xs = &x.data()[bi * l * d..(bi + 1) * l * d];
        let mut z = vec![0.0; l * d];
        for c in 0..d {
            let xc = column(xs, c, l, d);
            let s3 = causal_conv(&conv.bank.k3.data()[c * 3..c * 3 + 3], &xc);
            let sv = causal_conv(&conv.bank.kvar.data()[c * kv..(c + 1) * kv], &xc);
            let act: Vec<f64> = (0..l)
                .map(|t| {
                    let id = if conv.bank.include_identity { xc[t] } else { 0.0 };
                    silu(compensated_sum([s3[t], sv[t], id]))
                })
                .collect();
            let zc = causal_conv(&conv.long_kernel.data()[c * lmax..c * lmax + l.min(lmax)], &act);
            for t in 0..l {
                z[t * d + c] = zc[t];
            }
        }
        let proj = |inp: &[f64], w: &Tensor, bias: &Tensor, t: usize, j: usize| {
            compensated_dot(row(inp, t, d), &column(w.data(), j, d, d)) + bias.data()[j]
        };
        let mut q = vec![0.0; l * d];
        let mut k = vec![0.0; l * d];
        let mut v = vec![0.0; l * d];
        for t in 0..l {
            for j in 0..d {
                let zt = z[t * d + j];
                q[t * d + j] = p.alpha_q.data()[j] * zt + p.beta_q.data()[j];
                k[t * d + j] = p.alpha_k.data()[j] * zt + p.beta_k.data()[j];
                v[t * d + j] = silu(proj(xs, &p.w_v, &p.b_v, t, j));
            }
        }
        let attn = dense_linear_attention(&q, &k, &v, l, d, Mask::LowerInclusive, p.norm_gain.data(), 1e-6);
        for t in 0..l {
            for j in 0..d {
                let ga = silu(proj(&z, &p.w_g, &p.b_g, t, j));
                let go = sigmoid(proj(&z, &p.w_o, &p.b_o, t, j));
                let m = attn[t * d + j] * ga;
                out[bi * l * d + t * d + j] = m * go + xs[t * d + j] * (1.0 - go);
            }
        }
    }
    out
}
