//! Softmax attention and linear attention in three equivalent forms.
//!
//! Linear attention computes `Norm(Q (K^T V))` with an identity feature map
//! on `Q` and `K` and token-wise RMS normalization of the output. The causal
//! variant has a sequential oracle ([`LinearForm::Recurrent`]) and the tiled
//! form ([`LinearForm::Chunked`]): per chunk, the contribution of all earlier
//! chunks flows through a running `dk x dv` state (right product) while the
//! masked intra-chunk part uses the dense left product `(Q_c K_c^T ⊙ M) V_c`.
//!
//! Backward passes reuse the same cores. With `G = dO`:
//! `dQ = causal(G, V, K)`, `dK = anticausal(V, G, Q)`, `dV = anticausal(K, Q, G)`.

use rayon::prelude::*;

use crate::error::{ChelaError, Result};
use crate::numerics::ops::{rms_norm_rows, rms_norm_rows_backward, RMS_EPS};
use crate::numerics::{gemm, MatRef, Scalar, Tensor};

pub const DEFAULT_CHUNK: usize = 64;
const SOFTMAX_ROW_BLOCK: usize = 64;

/// Query, key and value sequences `[batch, len, d]`.
#[derive(Clone, Debug)]
pub struct AttentionInputs<T: Scalar = f64> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> AttentionInputs<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        let inp = Self { q, k, v };
        inp.dims()?;
        Ok(inp)
    }

    /// `(batch, len, d)`; all three must agree.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let a = self.q.dims3();
        if self.k.dims3() != a || self.v.dims3() != a {
            return Err(ChelaError::Shape(format!(
                "attention inputs disagree: q {:?}, k {:?}, v {:?}",
                self.q.shape(),
                self.k.shape(),
                self.v.shape()
            )));
        }
        Ok(a)
    }
}

/// Output normalization of linear attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnNorm<T: Scalar = f64> {
    pub gain: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> AttnNorm<T> {
    pub fn unit(d: usize) -> Self {
        Self {
            gain: vec![T::one(); d],
            eps: T::of(RMS_EPS),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `o_t` sums over `s <= t`.
    Causal,
    /// `o_t` sums over `s >= t`.
    AntiCausal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearForm {
    Noncausal,
    Recurrent,
    Chunked(usize),
}

/// Running inter-chunk accumulator plus the chunk-sized score tile.
///
/// After `c` chunks have been processed in the causal direction, `state`
/// holds `sum_t k_t^T v_t` over every token seen so far.
#[derive(Clone, Debug)]
pub struct ChunkState<T> {
    pub state: Vec<T>,
    scores: Vec<T>,
    chunk: usize,
    dk: usize,
    dv: usize,
    pub chunk_index: usize,
}

impl<T: Scalar> ChunkState<T> {
    pub fn new(chunk: usize, dk: usize, dv: usize) -> Self {
        assert!(chunk >= 1, "chunk size must be positive");
        Self {
            state: vec![T::zero(); dk * dv],
            scores: vec![T::zero(); chunk * chunk],
            chunk,
            dk,
            dv,
            chunk_index: 0,
        }
    }

    pub fn reset(&mut self) {
        self.state.fill(T::zero());
        self.chunk_index = 0;
    }

    /// Auxiliary bytes held while processing a sequence; independent of its length.
    pub fn bytes(&self) -> usize {
        (self.state.len() + self.scores.len()) * T::BYTES
    }

    /// One inner-loop step over a block of `n <= chunk` rows.
    pub fn process_chunk(&mut self, q: &[T], k: &[T], v: &[T], n: usize, dir: Direction, out: &mut [T]) {
        let (dk, dv) = (self.dk, self.dv);
        debug_assert!(n <= self.chunk);
        let qm = MatRef::new(q, n, dk);
        let km = MatRef::new(k, n, dk);
        let vm = MatRef::new(v, n, dv);
        // inter-chunk: O = Q S
        gemm(T::one(), qm, MatRef::new(&self.state, dk, dv), T::zero(), out, dv);
        // intra-chunk: O += (Q K^T ⊙ M) V
        let p = &mut self.scores[..n * n];
        gemm(T::one(), qm, km.t(), T::zero(), p, n);
        for i in 0..n {
            let row = &mut p[i * n..(i + 1) * n];
            match dir {
                Direction::Causal => row[i + 1..].fill(T::zero()),
                Direction::AntiCausal => row[..i].fill(T::zero()),
            }
        }
        gemm(T::one(), MatRef::new(p, n, n), vm, T::one(), out, dv);
        // S += K^T V
        gemm(T::one(), km.t(), vm, T::one(), &mut self.state, dv);
        self.chunk_index += 1;
    }
}

/// Tiled causal (or anti-causal) linear attention for one sequence, without
/// the output norm.
#[allow(clippy::too_many_arguments)]
pub fn linear_chunked_core<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    len: usize,
    dk: usize,
    dv: usize,
    dir: Direction,
    ws: &mut ChunkState<T>,
    out: &mut [T],
) {
    ws.reset();
    let c = ws.chunk;
    let n_chunks = len.div_ceil(c);
    let mut run = |ci: usize, ws: &mut ChunkState<T>| {
        let s = ci * c;
        let e = (s + c).min(len);
        ws.process_chunk(
            &q[s * dk..e * dk],
            &k[s * dk..e * dk],
            &v[s * dv..e * dv],
            e - s,
            dir,
            &mut out[s * dv..e * dv],
        );
    };
    match dir {
        Direction::Causal => (0..n_chunks).for_each(|ci| run(ci, ws)),
        Direction::AntiCausal => (0..n_chunks).rev().for_each(|ci| run(ci, ws)),
    }
}

/// Token-by-token recurrence `S += k_t^T v_t; o_t = q_t S`.
#[allow(clippy::too_many_arguments)]
pub fn linear_recurrent_core<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    len: usize,
    dk: usize,
    dv: usize,
    dir: Direction,
    state: &mut [T],
    out: &mut [T],
) {
    state.fill(T::zero());
    let mut step = |t: usize| {
        let kt = &k[t * dk..(t + 1) * dk];
        let vt = &v[t * dv..(t + 1) * dv];
        for (i, &ki) in kt.iter().enumerate() {
            for (s, &vj) in state[i * dv..(i + 1) * dv].iter_mut().zip(vt) {
                *s += ki * vj;
            }
        }
        let ot = &mut out[t * dv..(t + 1) * dv];
        ot.fill(T::zero());
        for (i, &qi) in q[t * dk..(t + 1) * dk].iter().enumerate() {
            for (o, &s) in ot.iter_mut().zip(&state[i * dv..(i + 1) * dv]) {
                *o += qi * s;
            }
        }
    };
    match dir {
        Direction::Causal => (0..len).for_each(&mut step),
        Direction::AntiCausal => (0..len).rev().for_each(&mut step),
    }
}

/// `O = Q (K^T V)` with no mask.
pub fn linear_noncausal_core<T: Scalar>(q: &[T], k: &[T], v: &[T], len: usize, dk: usize, dv: usize, out: &mut [T]) {
    let mut s = vec![T::zero(); dk * dv];
    gemm(T::one(), MatRef::new(k, len, dk).t(), MatRef::new(v, len, dv), T::zero(), &mut s, dv);
    gemm(T::one(), MatRef::new(q, len, dk), MatRef::new(&s, dk, dv), T::zero(), out, dv);
}

/// Auxiliary bytes a form needs per sequence (independent of `len` for the
/// recurrent and chunked forms).
pub fn linear_state_bytes<T: Scalar>(form: LinearForm, dk: usize, dv: usize) -> usize {
    match form {
        LinearForm::Noncausal | LinearForm::Recurrent => dk * dv * T::BYTES,
        LinearForm::Chunked(c) => ChunkState::<T>::new(c, dk, dv).bytes(),
    }
}

#[allow(clippy::too_many_arguments)]
fn core_batched<T: Scalar>(
    form: LinearForm,
    dir: Direction,
    q: &[T],
    k: &[T],
    v: &[T],
    b: usize,
    len: usize,
    dk: usize,
    dv: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); b * len * dv];
    out.par_chunks_mut(len * dv).enumerate().for_each(|(bi, o)| {
        let qi = &q[bi * len * dk..(bi + 1) * len * dk];
        let ki = &k[bi * len * dk..(bi + 1) * len * dk];
        let vi = &v[bi * len * dv..(bi + 1) * len * dv];
        match form {
            LinearForm::Noncausal => linear_noncausal_core(qi, ki, vi, len, dk, dv, o),
            LinearForm::Recurrent => {
                let mut st = vec![T::zero(); dk * dv];
                linear_recurrent_core(qi, ki, vi, len, dk, dv, dir, &mut st, o);
            }
            LinearForm::Chunked(c) => {
                let mut ws = ChunkState::new(c, dk, dv);
                linear_chunked_core(qi, ki, vi, len, dk, dv, dir, &mut ws, o);
            }
        }
    });
    out
}

/// Pre-norm output and per-token inverse RMS, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LinearAttentionCache<T> {
    pub pre_norm: Vec<T>,
    pub inv_rms: Vec<T>,
}

fn check_form(form: LinearForm) -> Result<()> {
    if let LinearForm::Chunked(0) = form {
        return Err(ChelaError::InvalidArgument("chunk size must be >= 1".into()));
    }
    Ok(())
}

pub fn linear_attention_forward_cached<T: Scalar>(
    form: LinearForm,
    inp: &AttentionInputs<T>,
    norm: &AttnNorm<T>,
) -> Result<(Tensor<T>, LinearAttentionCache<T>)> {
    check_form(form)?;
    let (b, l, d) = inp.dims()?;
    if norm.gain.len() != d {
        return Err(ChelaError::Shape(format!("norm gain has {} entries, model dim {d}", norm.gain.len())));
    }
    let pre = core_batched(form, Direction::Causal, inp.q.data(), inp.k.data(), inp.v.data(), b, l, d, d);
    let mut out = vec![T::zero(); pre.len()];
    let mut inv = vec![T::zero(); b * l];
    rms_norm_rows(&pre, &norm.gain, norm.eps, d, &mut out, &mut inv);
    let y = Tensor::from_vec(inp.q.shape(), out)?;
    Ok((y, LinearAttentionCache { pre_norm: pre, inv_rms: inv }))
}

/// `Norm(Q (K^T V))` with every token attending to the whole sequence.
pub fn linear_attention_noncausal<T: Scalar>(inp: &AttentionInputs<T>, norm: &AttnNorm<T>) -> Result<Tensor<T>> {
    linear_attention_forward_cached(LinearForm::Noncausal, inp, norm).map(|r| r.0)
}

/// Causal linear attention by sequential recurrence; the ground truth for
/// the chunked form.
pub fn linear_attention_recurrent<T: Scalar>(inp: &AttentionInputs<T>, norm: &AttnNorm<T>) -> Result<Tensor<T>> {
    linear_attention_forward_cached(LinearForm::Recurrent, inp, norm).map(|r| r.0)
}

/// Causal linear attention in the tiled form. `chunk` need not divide `len`.
pub fn linear_attention_chunked<T: Scalar>(
    inp: &AttentionInputs<T>,
    norm: &AttnNorm<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    linear_attention_forward_cached(LinearForm::Chunked(chunk), inp, norm).map(|r| r.0)
}

/// Cotangents `(dQ, dK, dV, dgain)` of a linear attention forward pass.
pub struct LinearAttentionGrads<T: Scalar> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dgain: Vec<T>,
}

pub fn linear_attention_backward<T: Scalar>(
    form: LinearForm,
    inp: &AttentionInputs<T>,
    norm: &AttnNorm<T>,
    cache: &LinearAttentionCache<T>,
    dout: &Tensor<T>,
) -> Result<LinearAttentionGrads<T>> {
    check_form(form)?;
    let (b, l, d) = inp.dims()?;
    inp.q.same_shape(dout, "linear attention cotangent")?;
    let mut dpre = vec![T::zero(); b * l * d];
    let mut dgain = vec![T::zero(); d];
    rms_norm_rows_backward(&cache.pre_norm, &norm.gain, &cache.inv_rms, dout.data(), d, &mut dpre, &mut dgain);
    let (q, k, v) = (inp.q.data(), inp.k.data(), inp.v.data());
    let dq = core_batched(form, Direction::Causal, &dpre, v, k, b, l, d, d);
    let dk = core_batched(form, Direction::AntiCausal, v, &dpre, q, b, l, d, d);
    let dv = core_batched(form, Direction::AntiCausal, k, q, &dpre, b, l, d, d);
    let shape = inp.q.shape();
    Ok(LinearAttentionGrads {
        dq: Tensor::from_vec(shape, dq)?,
        dk: Tensor::from_vec(shape, dk)?,
        dv: Tensor::from_vec(shape, dv)?,
        dgain,
    })
}

/// Unnormalized causal linear attention for one sequence and its reverse
/// pass; the benchmark entry points.
pub fn linear_core_forward<T: Scalar>(form: LinearForm, q: &[T], k: &[T], v: &[T], len: usize, d: usize) -> Vec<T> {
    core_batched(form, Direction::Causal, q, k, v, 1, len, d, d)
}

pub fn linear_core_backward<T: Scalar>(
    form: LinearForm,
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    len: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    (
        core_batched(form, Direction::Causal, g, v, k, 1, len, d, d),
        core_batched(form, Direction::AntiCausal, v, g, q, 1, len, d, d),
        core_batched(form, Direction::AntiCausal, k, q, g, 1, len, d, d),
    )
}

/// Row-blocked softmax attention for one sequence. Writes the output and the
/// per-row log-sum-exp of the scaled scores.
#[allow(clippy::too_many_arguments)]
pub fn softmax_core_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    len: usize,
    d: usize,
    causal: bool,
    out: &mut [T],
    lse: &mut [T],
) {
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut scores = vec![T::zero(); SOFTMAX_ROW_BLOCK * len];
    for r0 in (0..len).step_by(SOFTMAX_ROW_BLOCK) {
        let r1 = (r0 + SOFTMAX_ROW_BLOCK).min(len);
        let n = r1 - r0;
        let end = if causal { r1 } else { len };
        let s = &mut scores[..n * end];
        gemm(
            scale,
            MatRef::new(&q[r0 * d..r1 * d], n, d),
            MatRef::new(&k[..end * d], end, d).t(),
            T::zero(),
            s,
            end,
        );
        for i in 0..n {
            let row = &mut s[i * end..(i + 1) * end];
            let allowed = if causal { r0 + i + 1 } else { end };
            let m = row[..allowed].iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row[..allowed].iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            let inv = T::one() / z;
            for x in row[..allowed].iter_mut() {
                *x *= inv;
            }
            row[allowed..].fill(T::zero());
            lse[r0 + i] = m + z.ln();
        }
        gemm(
            T::one(),
            MatRef::new(s, n, end),
            MatRef::new(&v[..end * d], end, d),
            T::zero(),
            &mut out[r0 * d..r1 * d],
            d,
        );
    }
}

/// Reverse pass of [`softmax_core_forward`], recomputing probabilities block
/// by block. Overwrites `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn softmax_core_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    out: &[T],
    lse: &[T],
    dout: &[T],
    len: usize,
    d: usize,
    causal: bool,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let scale = T::one() / T::of(d as f64).sqrt();
    dk.fill(T::zero());
    dv.fill(T::zero());
    let delta: Vec<T> = (0..len)
        .map(|i| {
            out[i * d..(i + 1) * d]
                .iter()
                .zip(&dout[i * d..(i + 1) * d])
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect();
    let mut p = vec![T::zero(); SOFTMAX_ROW_BLOCK * len];
    let mut dp = vec![T::zero(); SOFTMAX_ROW_BLOCK * len];
    for r0 in (0..len).step_by(SOFTMAX_ROW_BLOCK) {
        let r1 = (r0 + SOFTMAX_ROW_BLOCK).min(len);
        let n = r1 - r0;
        let end = if causal { r1 } else { len };
        let qb = MatRef::new(&q[r0 * d..r1 * d], n, d);
        let kb = MatRef::new(&k[..end * d], end, d);
        let vb = MatRef::new(&v[..end * d], end, d);
        let gb = MatRef::new(&dout[r0 * d..r1 * d], n, d);
        let pb = &mut p[..n * end];
        gemm(scale, qb, kb.t(), T::zero(), pb, end);
        for i in 0..n {
            let allowed = if causal { r0 + i + 1 } else { end };
            let row = &mut pb[i * end..(i + 1) * end];
            for x in row[..allowed].iter_mut() {
                *x = (*x - lse[r0 + i]).exp();
            }
            row[allowed..].fill(T::zero());
        }
        // dV += P^T dO
        gemm(T::one(), MatRef::new(pb, n, end).t(), gb, T::one(), &mut dv[..end * d], d);
        // dP = dO V^T ; dS = P ⊙ (dP - delta)
        let dpb = &mut dp[..n * end];
        gemm(T::one(), gb, vb.t(), T::zero(), dpb, end);
        for i in 0..n {
            for j in 0..end {
                let idx = i * end + j;
                dpb[idx] = pb[idx] * (dpb[idx] - delta[r0 + i]);
            }
        }
        gemm(scale, MatRef::new(dpb, n, end), kb, T::zero(), &mut dq[r0 * d..r1 * d], d);
        gemm(scale, MatRef::new(dpb, n, end).t(), qb, T::one(), &mut dk[..end * d], d);
    }
}

pub fn softmax_state_bytes<T: Scalar>(len: usize) -> usize {
    (SOFTMAX_ROW_BLOCK * len + len) * T::BYTES
}

/// `softmax(Q K^T / sqrt(d)) V`, optionally causal.
pub fn softmax_attention<T: Scalar>(inp: &AttentionInputs<T>, causal: bool) -> Result<Tensor<T>> {
    let (b, l, d) = inp.dims()?;
    let mut out = vec![T::zero(); b * l * d];
    out.par_chunks_mut(l * d).enumerate().for_each(|(bi, o)| {
        let r = bi * l * d..(bi + 1) * l * d;
        let mut lse = vec![T::zero(); l];
        softmax_core_forward(
            &inp.q.data()[r.clone()],
            &inp.k.data()[r.clone()],
            &inp.v.data()[r],
            l,
            d,
            causal,
            o,
            &mut lse,
        );
    });
    let y = Tensor::from_vec(inp.q.shape(), out)?;
    Ok(y)
}

/// `(dQ, dK, dV)` for [`softmax_attention`].
pub fn softmax_attention_backward<T: Scalar>(
    inp: &AttentionInputs<T>,
    causal: bool,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, l, d) = inp.dims()?;
    inp.q.same_shape(dout, "softmax cotangent")?;
    let mut dq = vec![T::zero(); b * l * d];
    let mut dk = vec![T::zero(); b * l * d];
    let mut dv = vec![T::zero(); b * l * d];
    for bi in 0..b {
        let r = bi * l * d..(bi + 1) * l * d;
        let (q, k, v) = (&inp.q.data()[r.clone()], &inp.k.data()[r.clone()], &inp.v.data()[r.clone()]);
        let mut out = vec![T::zero(); l * d];
        let mut lse = vec![T::zero(); l];
        softmax_core_forward(q, k, v, l, d, causal, &mut out, &mut lse);
        softmax_core_backward(
            q,
            k,
            v,
            &out,
            &lse,
            &dout.data()[r.clone()],
            l,
            d,
            causal,
            &mut dq[r.clone()],
            &mut dk[r.clone()],
            &mut dv[r],
        );
    }
    let shape = inp.q.shape();
    Ok((Tensor::from_vec(shape, dq)?, Tensor::from_vec(shape, dk)?, Tensor::from_vec(shape, dv)?))
}
