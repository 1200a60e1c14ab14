//! Causal depthwise convolutions: direct reference, FFT fast path, the
//! short-long module and exact fusion of the parallel short branches.
//!
//! All convolutions are left-padded (no lookahead):
//! `y_t = sum_{j <= min(t, k-1)} kernel_j * x_{t-j}`.
//! Sequence tensors are `[batch, length, channels]`; kernels are stored one
//! row per channel.

use num_complex::Complex;

use crate::error::{ChelaError, Result};
use crate::numerics::{silu, silu_grad, FftPlan, Rng, Scalar, Tensor};

/// Width of the length-dependent short kernel: `2 log10(L) + 1`, rounded up,
/// bumped to the next odd integer, never below 3.
pub fn short_kernel_size(len: usize) -> usize {
    assert!(len >= 1, "sequence length must be positive");
    let v = 2.0 * (len as f64).log10() + 1.0;
    let r = v.round();
    let mut k = if (v - r).abs() < 1e-9 { r as usize } else { v.ceil() as usize };
    if k % 2 == 0 {
        k += 1;
    }
    k.max(3)
}

/// Direct causal convolution. Kernels longer than `x` are truncated.
pub fn causal_conv_direct<T: Scalar>(kernel: &[T], x: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    conv_direct_into(kernel, x, &mut y, false);
    y
}

fn conv_direct_into<T: Scalar>(kernel: &[T], x: &[T], y: &mut [T], accumulate: bool) {
    let taps = kernel.len().min(x.len());
    if !accumulate {
        y.fill(T::zero());
    }
    for (j, &w) in kernel[..taps].iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        for (yt, &xv) in y[j..].iter_mut().zip(x) {
            *yt += w * xv;
        }
    }
}

/// Adjoint of the direct convolution with respect to `x`:
/// `dx_s = sum_j kernel_j g_{s+j}`. Accumulates into `dx`.
fn conv_direct_adjoint_input<T: Scalar>(kernel: &[T], g: &[T], dx: &mut [T]) {
    let taps = kernel.len().min(g.len());
    for (j, &w) in kernel[..taps].iter().enumerate() {
        for (d, &gv) in dx.iter_mut().zip(&g[j..]) {
            *d += w * gv;
        }
    }
}

/// Adjoint with respect to the kernel: `dk_j = sum_t g_t x_{t-j}`.
/// Accumulates into `dk`.
fn conv_direct_adjoint_kernel<T: Scalar>(x: &[T], g: &[T], dk: &mut [T]) {
    let taps = dk.len().min(x.len());
    for (j, slot) in dk[..taps].iter_mut().enumerate() {
        let mut acc = T::zero();
        for (&gv, &xv) in g[j..].iter().zip(x) {
            acc += gv * xv;
        }
        *slot += acc;
    }
}

/// FFT convolution of sequences of length `len` with kernels of at most
/// `kernel_len` taps. Operands are zero-padded to the next power of two
/// `>= len + kernel_len - 1`, which also makes both adjoints wrap-free.
pub struct FftConv<T> {
    plan: FftPlan<T>,
    len: usize,
    kernel_len: usize,
}

impl<T: Scalar> FftConv<T> {
    pub fn new(len: usize, kernel_len: usize) -> Result<Self> {
        if len == 0 {
            return Err(ChelaError::Empty("causal_conv_fft"));
        }
        let kernel_len = kernel_len.clamp(1, len);
        let n = (len + kernel_len - 1).next_power_of_two();
        Ok(Self {
            plan: FftPlan::new(n)?,
            len,
            kernel_len,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.plan.len()
    }

    /// Spectrum of a kernel (truncated to `kernel_len`) or of a signal.
    pub fn spectrum(&self, v: &[T]) -> Vec<Complex<T>> {
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.plan.len()];
        for (b, &x) in buf.iter_mut().zip(v.iter().take(self.len)) {
            b.re = x;
        }
        self.plan.process(&mut buf, false);
        buf
    }

    pub fn kernel_spectrum(&self, kernel: &[T]) -> Vec<Complex<T>> {
        self.spectrum(&kernel[..kernel.len().min(self.kernel_len)])
    }

    fn product_inverse(&self, a: &[Complex<T>], b: &[Complex<T>], conj_b: bool, keep: usize, out: &mut [T]) {
        let mut buf: Vec<Complex<T>> = a
            .iter()
            .zip(b)
            .map(|(x, y)| if conj_b { x * y.conj() } else { x * y })
            .collect();
        self.plan.process(&mut buf, true);
        for (o, v) in out[..keep].iter_mut().zip(&buf) {
            *o = v.re;
        }
    }

    /// Causal convolution given a precomputed kernel spectrum.
    pub fn apply(&self, kernel_spec: &[Complex<T>], x: &[T], out: &mut [T]) {
        let xs = self.spectrum(x);
        self.product_inverse(&xs, kernel_spec, false, self.len, out);
    }

    /// `dx_s = sum_j k_j g_{s+j}`, overwriting `dx`.
    pub fn adjoint_input(&self, kernel_spec: &[Complex<T>], g: &[T], dx: &mut [T]) {
        let gs = self.spectrum(g);
        self.product_inverse(&gs, kernel_spec, true, self.len, dx);
    }

    /// `dk_j = sum_t g_t x_{t-j}` for `j < kernel_len`, given the spectrum of
    /// `x`. Overwrites the first `kernel_len` entries of `dk`.
    pub fn adjoint_kernel(&self, x_spec: &[Complex<T>], g: &[T], dk: &mut [T]) {
        let gs = self.spectrum(g);
        let keep = self.kernel_len.min(dk.len());
        self.product_inverse(&gs, x_spec, true, keep, dk);
    }
}

impl<T: Scalar> FftConv<T> {
    /// Spectrum of `a + i b` for two real signals (`b` absent reads as zero).
    fn pair_spectrum(&self, a: &[T], b: Option<&[T]>) -> Vec<Complex<T>> {
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.plan.len()];
        for (z, &x) in buf.iter_mut().zip(a.iter().take(self.len)) {
            z.re = x;
        }
        if let Some(b) = b {
            for (z, &x) in buf.iter_mut().zip(b.iter().take(self.len)) {
                z.im = x;
            }
        }
        self.plan.process(&mut buf, false);
        buf
    }

    /// Inverse of a spectrum whose real and imaginary parts hold the
    /// transforms of two real signals; writes the first `keep` samples.
    fn pair_inverse(&self, mut buf: Vec<Complex<T>>, keep: usize, a: &mut [T], b: Option<&mut [T]>) {
        self.plan.process(&mut buf, true);
        for (o, v) in a[..keep].iter_mut().zip(&buf) {
            *o = v.re;
        }
        if let Some(b) = b {
            for (o, v) in b[..keep].iter_mut().zip(&buf) {
                *o = v.im;
            }
        }
    }
}

/// Splits the transform `z` of `a + i b` into the transforms of `a` and `b`
/// by conjugate symmetry, and accumulates `conj(A) G + conj(B) H` into `acc`
/// where `G`, `H` are split from `w` in the same way.
fn accumulate_cross<T: Scalar>(w: &[Complex<T>], z: &[Complex<T>], acc: &mut [Complex<T>]) {
    let n = z.len();
    let half = T::of(0.5);
    for k in 0..n {
        let m = (n - k) % n;
        let (zk, zm) = (z[k], z[m].conj());
        let (wk, wm) = (w[k], w[m].conj());
        let a = (zk + zm) * half;
        let bi = (zk - zm) * half;
        let b = Complex::new(bi.im, -bi.re);
        let g = (wk + wm) * half;
        let hi = (wk - wm) * half;
        let h = Complex::new(hi.im, -hi.re);
        acc[k] = acc[k] + g * a.conj() + h * b.conj();
    }
}

/// FFT causal convolution, output truncated to `x.len()`.
pub fn causal_conv_fft<T: Scalar>(kernel: &[T], x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() || kernel.is_empty() {
        return Err(ChelaError::Empty("causal_conv_fft"));
    }
    let conv = FftConv::new(x.len(), kernel.len())?;
    let ks = conv.kernel_spectrum(kernel);
    let mut y = vec![T::zero(); x.len()];
    conv.apply(&ks, x, &mut y);
    Ok(y)
}

/// `[B, L, C]` row-major into `[B, C, L]`.
pub fn to_channel_major<T: Scalar>(x: &[T], b: usize, l: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let src = &x[bi * l * c..(bi + 1) * l * c];
        let dst = &mut out[bi * l * c..(bi + 1) * l * c];
        for t in 0..l {
            for ch in 0..c {
                dst[ch * l + t] = src[t * c + ch];
            }
        }
    }
    out
}

/// Inverse of [`to_channel_major`].
pub fn from_channel_major<T: Scalar>(x: &[T], b: usize, l: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let src = &x[bi * l * c..(bi + 1) * l * c];
        let dst = &mut out[bi * l * c..(bi + 1) * l * c];
        for ch in 0..c {
            for t in 0..l {
                dst[t * c + ch] = src[ch * l + t];
            }
        }
    }
    out
}

fn seq_dims<T: Scalar>(x: &Tensor<T>, channels: usize, what: &str) -> Result<(usize, usize)> {
    let (b, l, c) = x.dims3();
    if c != channels {
        return Err(ChelaError::Shape(format!("{what}: input has {c} channels, parameters {channels}")));
    }
    Ok((b, l))
}

/// Depthwise FFT convolution of channel-major rows with one kernel per
/// channel (`kernels` is `[C, K]`). Batch rows of a channel are transformed
/// two at a time as the real and imaginary parts of one complex signal.
pub fn depthwise_fft<T: Scalar>(kernels: &Tensor<T>, x_cm: &[T], b: usize, l: usize) -> Result<Vec<T>> {
    let (c, k) = (kernels.shape()[0], kernels.shape()[1]);
    let conv = FftConv::new(l, k)?;
    let mut out = vec![T::zero(); x_cm.len()];
    let row = |bi: usize, ch: usize| (bi * c + ch) * l;
    for ch in 0..c {
        let ks = conv.kernel_spectrum(&kernels.data()[ch * k..(ch + 1) * k]);
        for b0 in (0..b).step_by(2) {
            let (o0, second) = (row(b0, ch), (b0 + 1 < b).then(|| row(b0 + 1, ch)));
            let mut z = conv.pair_spectrum(&x_cm[o0..o0 + l], second.map(|o| &x_cm[o..o + l]));
            for (v, kv) in z.iter_mut().zip(&ks) {
                *v = *v * kv;
            }
            match second {
                Some(o1) => {
                    let (lo, hi) = out.split_at_mut(o1);
                    conv.pair_inverse(z, l, &mut lo[o0..o0 + l], Some(&mut hi[..l]));
                }
                None => conv.pair_inverse(z, l, &mut out[o0..o0 + l], None),
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`depthwise_fft`]: returns `(dx_cm, dkernels)`. The kernel
/// cotangent of a channel is summed over the batch in the frequency domain
/// and inverted once.
pub fn depthwise_fft_backward<T: Scalar>(
    kernels: &Tensor<T>,
    x_cm: &[T],
    g_cm: &[T],
    b: usize,
    l: usize,
) -> Result<(Vec<T>, Tensor<T>)> {
    let (c, k) = (kernels.shape()[0], kernels.shape()[1]);
    let conv = FftConv::new(l, k)?;
    let n = conv.padded_len();
    let mut dx = vec![T::zero(); x_cm.len()];
    let mut dk = Tensor::zeros(&[c, k]);
    let row = |bi: usize, ch: usize| (bi * c + ch) * l;
    for ch in 0..c {
        let ks = conv.kernel_spectrum(&kernels.data()[ch * k..(ch + 1) * k]);
        let mut cross = vec![Complex::new(T::zero(), T::zero()); n];
        for b0 in (0..b).step_by(2) {
            let (o0, second) = (row(b0, ch), (b0 + 1 < b).then(|| row(b0 + 1, ch)));
            let zg = conv.pair_spectrum(&g_cm[o0..o0 + l], second.map(|o| &g_cm[o..o + l]));
            let zx = conv.pair_spectrum(&x_cm[o0..o0 + l], second.map(|o| &x_cm[o..o + l]));
            accumulate_cross(&zg, &zx, &mut cross);
            let prod: Vec<Complex<T>> = zg.iter().zip(&ks).map(|(g, kv)| g * kv.conj()).collect();
            match second {
                Some(o1) => {
                    let (lo, hi) = dx.split_at_mut(o1);
                    conv.pair_inverse(prod, l, &mut lo[o0..o0 + l], Some(&mut hi[..l]));
                }
                None => conv.pair_inverse(prod, l, &mut dx[o0..o0 + l], None),
            }
        }
        let keep = conv.kernel_len.min(k);
        conv.pair_inverse(cross, keep, &mut dk.data_mut()[ch * k..(ch + 1) * k], None);
    }
    Ok((dx, dk))
}

/// Parallel short kernels: a width-3 bank, a width-`k(L)` bank and an
/// optional identity skip, summed.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortConvBank<T: Scalar = f64> {
    /// `[C, 3]`
    pub k3: Tensor<T>,
    /// `[C, short_kernel_size(L)]`
    pub kvar: Tensor<T>,
    pub include_identity: bool,
}

impl ShortConvBank<f64> {
    pub fn init(channels: usize, max_len: usize, include_identity: bool, rng: &mut Rng) -> Self {
        let kv = short_kernel_size(max_len);
        let mut draw = |k: usize| {
            let data = (0..channels * k).map(|_| rng.normal(0.0, 1.0 / k as f64)).collect();
            Tensor::from_vec(&[channels, k], data).expect("shape")
        };
        let k3 = draw(3);
        let kvar = draw(kv);
        Self {
            k3,
            kvar,
            include_identity,
        }
    }
}

impl<T: Scalar> ShortConvBank<T> {
    pub fn channels(&self) -> usize {
        self.k3.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.k3.shape() != [c, 3] || self.kvar.rank() != 2 || self.kvar.shape()[0] != c {
            return Err(ChelaError::Shape(format!(
                "short bank: k3 {:?}, kvar {:?}",
                self.k3.shape(),
                self.kvar.shape()
            )));
        }
        if self.kvar.shape()[1] % 2 == 0 {
            return Err(ChelaError::Shape("short kernel lengths must be odd".into()));
        }
        Ok(())
    }

    fn row_forward(&self, ch: usize, x: &[T], y: &mut [T]) {
        let kv = self.kvar.shape()[1];
        conv_direct_into(&self.k3.data()[ch * 3..ch * 3 + 3], x, y, false);
        conv_direct_into(&self.kvar.data()[ch * kv..(ch + 1) * kv], x, y, true);
        if self.include_identity {
            for (a, &b) in y.iter_mut().zip(x) {
                *a += b;
            }
        }
    }
}

/// Sum of the three short branches, depthwise.
pub fn short_branch_forward<T: Scalar>(bank: &ShortConvBank<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    bank.validate()?;
    let c = bank.channels();
    let (b, l) = seq_dims(x, c, "short_branch_forward")?;
    let xc = to_channel_major(x.data(), b, l, c);
    let mut yc = vec![T::zero(); xc.len()];
    for (i, (xr, yr)) in xc.chunks_exact(l).zip(yc.chunks_exact_mut(l)).enumerate() {
        bank.row_forward(i % c, xr, yr);
    }
    Tensor::from_vec(x.shape(), from_channel_major(&yc, b, l, c))
}

/// Single kernel equivalent to the short bank.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedShortKernel<T: Scalar = f64> {
    /// `[C, short_kernel_size(L)]`
    pub kernel: Tensor<T>,
}

/// `fused_j = kvar_j + k3_j (j < 3) + [j == 0 and identity]`.
pub fn fuse_short_branches<T: Scalar>(bank: &ShortConvBank<T>) -> Result<FusedShortKernel<T>> {
    bank.validate()?;
    let c = bank.channels();
    let kv = bank.kvar.shape()[1];
    let width = kv.max(3);
    let mut kernel = Tensor::zeros(&[c, width]);
    let out = kernel.data_mut();
    for ch in 0..c {
        let row = &mut out[ch * width..(ch + 1) * width];
        for (j, &v) in bank.kvar.data()[ch * kv..(ch + 1) * kv].iter().enumerate() {
            row[j] += v;
        }
        for (j, &v) in bank.k3.data()[ch * 3..ch * 3 + 3].iter().enumerate() {
            row[j] += v;
        }
        if bank.include_identity {
            row[0] += T::one();
        }
    }
    Ok(FusedShortKernel { kernel })
}

/// Depthwise direct convolution with the fused kernel.
pub fn fused_short_forward<T: Scalar>(fused: &FusedShortKernel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, k) = (fused.kernel.shape()[0], fused.kernel.shape()[1]);
    let (b, l) = seq_dims(x, c, "fused_short_forward")?;
    let xc = to_channel_major(x.data(), b, l, c);
    let mut yc = vec![T::zero(); xc.len()];
    for (i, (xr, yr)) in xc.chunks_exact(l).zip(yc.chunks_exact_mut(l)).enumerate() {
        let ch = i % c;
        conv_direct_into(&fused.kernel.data()[ch * k..(ch + 1) * k], xr, yr, false);
    }
    Tensor::from_vec(x.shape(), from_channel_major(&yc, b, l, c))
}

/// Short bank followed by SiLU and a per-channel long kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortLongConvParams<T: Scalar = f64> {
    pub bank: ShortConvBank<T>,
    /// `[C, max_len]`
    pub long_kernel: Tensor<T>,
}

/// Long kernel draw: `normal(0, 1/L)` shaped by `exp(-decay * t)`.
pub fn init_long_kernel(channels: usize, max_len: usize, decay: f64, rng: &mut Rng) -> Tensor {
    let std = 1.0 / max_len as f64;
    let mut data = Vec::with_capacity(channels * max_len);
    for _ in 0..channels {
        for t in 0..max_len {
            data.push(rng.normal(0.0, std) * (-decay * t as f64).exp());
        }
    }
    Tensor::from_vec(&[channels, max_len], data).expect("shape")
}

pub const LONG_KERNEL_DECAY: f64 = 0.01;

impl ShortLongConvParams<f64> {
    pub fn init(channels: usize, max_len: usize, include_identity: bool, rng: &mut Rng) -> Self {
        let bank = ShortConvBank::init(channels, max_len, include_identity, rng);
        let long_kernel = init_long_kernel(channels, max_len, LONG_KERNEL_DECAY, rng);
        Self { bank, long_kernel }
    }
}

impl<T: Scalar> ShortLongConvParams<T> {
    pub fn max_len(&self) -> usize {
        self.long_kernel.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.long_kernel.shape()[0]
    }
}

/// Saved activations for [`short_long_backward`]: the pre-SiLU short-branch
/// output in channel-major layout.
#[derive(Clone, Debug)]
pub struct ShortLongCache<T> {
    pre: Vec<T>,
    b: usize,
    l: usize,
}

/// Gradients of the short-long parameters.
#[derive(Clone, Debug)]
pub struct ShortLongGrads<T: Scalar = f64> {
    pub k3: Tensor<T>,
    pub kvar: Tensor<T>,
    pub long_kernel: Tensor<T>,
}

fn check_len<T: Scalar>(p: &ShortLongConvParams<T>, l: usize) -> Result<()> {
    if l > p.max_len() {
        return Err(ChelaError::LengthExceeded { len: l, max: p.max_len() });
    }
    Ok(())
}

/// `Z = K_long(silu(K_short(X)))`.
pub fn short_long_forward<T: Scalar>(p: &ShortLongConvParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    short_long_forward_cached(p, x).map(|(z, _)| z)
}

pub fn short_long_forward_cached<T: Scalar>(
    p: &ShortLongConvParams<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, ShortLongCache<T>)> {
    p.bank.validate()?;
    let c = p.channels();
    let (b, l) = seq_dims(x, c, "short_long_forward")?;
    check_len(p, l)?;
    let xc = to_channel_major(x.data(), b, l, c);
    let mut pre = vec![T::zero(); xc.len()];
    for (i, (xr, yr)) in xc.chunks_exact(l).zip(pre.chunks_exact_mut(l)).enumerate() {
        p.bank.row_forward(i % c, xr, yr);
    }
    let act: Vec<T> = pre.iter().map(|&v| silu(v)).collect();
    let zc = long_conv_rows(&p.long_kernel, &act, b, l)?;
    let z = Tensor::from_vec(x.shape(), from_channel_major(&zc, b, l, c))?;
    Ok((z, ShortLongCache { pre, b, l }))
}

fn long_conv_rows<T: Scalar>(long: &Tensor<T>, x_cm: &[T], b: usize, l: usize) -> Result<Vec<T>> {
    let (c, lmax) = (long.shape()[0], long.shape()[1]);
    if lmax == l {
        return depthwise_fft(long, x_cm, b, l);
    }
    let trimmed = trim_kernel(long, c, lmax, l);
    depthwise_fft(&trimmed, x_cm, b, l)
}

fn trim_kernel<T: Scalar>(k: &Tensor<T>, c: usize, kl: usize, keep: usize) -> Tensor<T> {
    let keep = keep.min(kl);
    let mut out = Tensor::zeros(&[c, keep]);
    for ch in 0..c {
        out.data_mut()[ch * keep..(ch + 1) * keep].copy_from_slice(&k.data()[ch * kl..ch * kl + keep]);
    }
    out
}

/// Inference path: fused short kernel, SiLU, long kernel.
pub fn short_long_forward_fused<T: Scalar>(
    fused: &FusedShortKernel<T>,
    long_kernel: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let c = long_kernel.shape()[0];
    let (b, l) = seq_dims(x, c, "short_long_forward_fused")?;
    if l > long_kernel.shape()[1] {
        return Err(ChelaError::LengthExceeded { len: l, max: long_kernel.shape()[1] });
    }
    let s = fused_short_forward(fused, x)?;
    let act: Vec<T> = to_channel_major(s.data(), b, l, c).into_iter().map(silu).collect();
    let zc = long_conv_rows(long_kernel, &act, b, l)?;
    Tensor::from_vec(x.shape(), from_channel_major(&zc, b, l, c))
}

/// Reverse pass of [`short_long_forward`]: `(dX, parameter grads)`.
pub fn short_long_backward<T: Scalar>(
    p: &ShortLongConvParams<T>,
    x: &Tensor<T>,
    cache: &ShortLongCache<T>,
    dz: &Tensor<T>,
) -> Result<(Tensor<T>, ShortLongGrads<T>)> {
    let c = p.channels();
    let (b, l) = (cache.b, cache.l);
    x.same_shape(dz, "short_long_backward")?;
    let xc = to_channel_major(x.data(), b, l, c);
    let gc = to_channel_major(dz.data(), b, l, c);
    let act: Vec<T> = cache.pre.iter().map(|&v| silu(v)).collect();

    let lmax = p.max_len();
    let long = if lmax == l { p.long_kernel.clone() } else { trim_kernel(&p.long_kernel, c, lmax, l) };
    let (dact, dlong_used) = depthwise_fft_backward(&long, &act, &gc, b, l)?;
    let mut dlong = Tensor::zeros(&[c, lmax]);
    let used = dlong_used.shape()[1];
    for ch in 0..c {
        dlong.data_mut()[ch * lmax..ch * lmax + used].copy_from_slice(&dlong_used.data()[ch * used..(ch + 1) * used]);
    }

    let dpre: Vec<T> = dact.iter().zip(&cache.pre).map(|(&g, &s)| g * silu_grad(s)).collect();
    let kv = p.bank.kvar.shape()[1];
    let mut dk3 = Tensor::zeros(&[c, 3]);
    let mut dkvar = Tensor::zeros(&[c, kv]);
    let mut dxc = vec![T::zero(); xc.len()];
    for (i, ((xr, gr), dxr)) in xc
        .chunks_exact(l)
        .zip(dpre.chunks_exact(l))
        .zip(dxc.chunks_exact_mut(l))
        .enumerate()
    {
        let ch = i % c;
        let k3 = &p.bank.k3.data()[ch * 3..ch * 3 + 3];
        let kvr = &p.bank.kvar.data()[ch * kv..(ch + 1) * kv];
        if p.bank.include_identity {
            dxr.copy_from_slice(gr);
        }
        conv_direct_adjoint_input(k3, gr, dxr);
        conv_direct_adjoint_input(kvr, gr, dxr);
        conv_direct_adjoint_kernel(xr, gr, &mut dk3.data_mut()[ch * 3..ch * 3 + 3]);
        conv_direct_adjoint_kernel(xr, gr, &mut dkvar.data_mut()[ch * kv..(ch + 1) * kv]);
    }
    let dx = Tensor::from_vec(x.shape(), from_channel_major(&dxc, b, l, c))?;
    Ok((
        dx,
        ShortLongGrads {
            k3: dk3,
            kvar: dkvar,
            long_kernel: dlong,
        },
    ))
}

/// Adjoints of the 1-D causal convolution, exposed for gradient checks.
pub fn causal_conv_vjp<T: Scalar>(kernel: &[T], x: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    conv_direct_adjoint_input(kernel, g, &mut dx);
    conv_direct_adjoint_kernel(x, g, &mut dk);
    (dx, dk)
}
