//! The gated CHELA layer, the pre-norm block and full-model assembly.
//!
//! Layer, for `X` of shape `[B, L, d]`:
//!
//! ```text
//! Z   = mixer(X)                     short-long conv | long conv | SSM
//! Q   = alpha_q * Z + beta_q
//! K   = alpha_k * Z + beta_k
//! V   = silu(X W_v + b_v)
//! G_a = silu(Z W_g + b_g)
//! M   = Norm(causal linear attention(Q, K, V)) * G_a
//! G_o = sigmoid(Z W_o + b_o)
//! U   = M * G_o + X * (1 - G_o)
//! ```
//!
//! Block: `X_a = layer(LN(X))`, `Y = FFN(LN(X_a)) + X_a` with
//! `FFN(x) = W_2 silu(W_1 x + b_1) + b_2` and hidden width `2 d`.
//!
//! Every forward has a `_cached` variant and a hand-written backward that
//! returns gradients in a parameter struct of the same shape.

use serde::{Deserialize, Serialize};

use crate::attention::{
    linear_attention_backward, linear_attention_forward_cached, AttentionInputs, AttnNorm, LinearAttentionCache,
    LinearForm, DEFAULT_CHUNK,
};
use crate::conv::{
    from_channel_major, init_long_kernel, short_kernel_size, short_long_backward, short_long_forward_cached,
    to_channel_major, ShortConvBank, ShortLongCache, ShortLongConvParams, LONG_KERNEL_DECAY,
};
use crate::error::{ChelaError, Result};
use crate::numerics::ops::{layer_norm_rows, layer_norm_rows_backward, LN_EPS, RMS_EPS};
use crate::numerics::{gemm, sigmoid, silu, silu_grad, MatRef, Rng, Tensor};
use crate::ssm::{SsmMixer, DEFAULT_DELTA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskHead {
    /// Per-position logits over the vocabulary.
    Lm,
    /// Mean over positions, then a linear map to class logits.
    #[serde(alias = "classification-meanpool")]
    Classification,
    /// Last position, linear map to one scalar.
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    ShortLong,
    LongConv,
    Ssm,
}

fn default_true() -> bool {
    true
}

fn default_state_dim() -> usize {
    16
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_chunk() -> usize {
    DEFAULT_CHUNK
}

/// Model shape. The JSON form uses exactly these field names; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub max_len: usize,
    /// Token vocabulary; 0 when the model reads real-valued features.
    pub vocab_size: usize,
    pub task_head: TaskHead,
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    pub mixer: MixerKind,
    pub seed: u64,
    /// Feature channels for feature inputs (0 for token inputs).
    #[serde(default)]
    pub input_dim: usize,
    /// Classes of the classification head.
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub include_identity: bool,
    #[serde(default = "default_state_dim")]
    pub ssm_state_dim: usize,
    #[serde(default = "default_delta")]
    pub ssm_delta: f64,
}

impl ModelConfig {
    /// Token-input language model with the default mixer settings.
    pub fn lm(depth: usize, d_model: usize, max_len: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            depth,
            d_model,
            max_len,
            vocab_size,
            task_head: TaskHead::Lm,
            chunk: DEFAULT_CHUNK,
            mixer: MixerKind::ShortLong,
            seed,
            input_dim: 0,
            num_classes: 0,
            include_identity: true,
            ssm_state_dim: default_state_dim(),
            ssm_delta: DEFAULT_DELTA,
        }
    }

    /// Feature-input scalar regression model.
    pub fn regression(depth: usize, d_model: usize, max_len: usize, input_dim: usize, seed: u64) -> Self {
        Self {
            vocab_size: 0,
            task_head: TaskHead::Regression,
            input_dim,
            ..Self::lm(depth, d_model, max_len, 0, seed)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ChelaError::InvalidArgument(format!("config: {m}")));
        if self.d_model == 0 {
            return bad("d_model must be positive");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if self.chunk == 0 {
            return bad("chunk must be positive");
        }
        if self.mixer == MixerKind::Ssm && self.ssm_state_dim == 0 {
            return bad("ssm_state_dim must be positive");
        }
        if !(self.ssm_delta > 0.0) {
            return bad("ssm_delta must be positive");
        }
        let tokens = self.vocab_size > 0;
        if tokens == (self.input_dim > 0) {
            return bad("exactly one of vocab_size and input_dim must be positive");
        }
        match self.task_head {
            TaskHead::Lm if !tokens => bad("lm head needs vocab_size > 0"),
            TaskHead::Classification if self.num_classes == 0 => bad("classification head needs num_classes > 0"),
            TaskHead::Regression if tokens => bad("regression head reads features (vocab_size must be 0)"),
            _ => Ok(()),
        }
    }

    pub fn uses_tokens(&self) -> bool {
        self.vocab_size > 0
    }

    pub fn output_dim(&self) -> usize {
        match self.task_head {
            TaskHead::Lm => self.vocab_size,
            TaskHead::Classification => self.num_classes,
            TaskHead::Regression => 1,
        }
    }
}

/// Named access to every trainable tensor, in a fixed order.
pub trait Params: Clone {
    fn named(&self) -> Vec<(String, &Tensor)>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same structure with every trainable tensor set to zero.
    fn zeroed(&self) -> Self {
        let mut g = self.clone();
        for t in g.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        g
    }

    /// Overwrites the trainable tensors from `src`, which must match
    /// [`Params::named`] in order and shape.
    fn assign(&mut self, src: &[Tensor]) -> Result<()> {
        let slots = self.tensors_mut();
        if slots.len() != src.len() {
            return Err(ChelaError::Shape(format!("expected {} tensors, got {}", slots.len(), src.len())));
        }
        for (dst, s) in slots.into_iter().zip(src) {
            if dst.shape() != s.shape() {
                return Err(ChelaError::Shape(format!(
                    "parameter shape {:?} vs {:?}",
                    dst.shape(),
                    s.shape()
                )));
            }
            dst.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    fn flat(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }
}

fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    inner.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Token mixer producing `Z`.
#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    ShortLong(ShortLongConvParams),
    /// Short bank removed: `Z = K_l(silu(X))`. The stored bank is a fixed
    /// identity-only bank and is not a parameter.
    LongConv(ShortLongConvParams),
    Ssm(SsmMixer),
}

impl Mixer {
    pub fn init(kind: MixerKind, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let (d, l) = (cfg.d_model, cfg.max_len);
        Ok(match kind {
            MixerKind::ShortLong => Mixer::ShortLong(ShortLongConvParams::init(d, l, cfg.include_identity, rng)),
            MixerKind::LongConv => Mixer::LongConv(long_only(init_long_kernel(d, l, LONG_KERNEL_DECAY, rng))),
            MixerKind::Ssm => Mixer::Ssm(SsmMixer::init(d, cfg.ssm_state_dim, cfg.ssm_delta, l, rng)?),
        })
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::ShortLong(_) => MixerKind::ShortLong,
            Mixer::LongConv(_) => MixerKind::LongConv,
            Mixer::Ssm(_) => MixerKind::Ssm,
        }
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        match self {
            Mixer::ShortLong(p) => vec![
                ("k3".into(), &p.bank.k3),
                ("kvar".into(), &p.bank.kvar),
                ("long_kernel".into(), &p.long_kernel),
            ],
            Mixer::LongConv(p) => vec![("long_kernel".into(), &p.long_kernel)],
            Mixer::Ssm(s) => vec![("c".into(), &s.c)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Mixer::ShortLong(p) => vec![&mut p.bank.k3, &mut p.bank.kvar, &mut p.long_kernel],
            Mixer::LongConv(p) => vec![&mut p.long_kernel],
            Mixer::Ssm(s) => vec![&mut s.c],
        }
    }

    fn channels(&self) -> usize {
        match self {
            Mixer::ShortLong(p) | Mixer::LongConv(p) => p.channels(),
            Mixer::Ssm(s) => s.c.shape()[0],
        }
    }
}

/// Short-long parameters with an identity-only bank around `long_kernel`.
pub fn long_only(long_kernel: Tensor) -> ShortLongConvParams {
    let c = long_kernel.shape()[0];
    ShortLongConvParams {
        bank: ShortConvBank {
            k3: Tensor::zeros(&[c, 3]),
            kvar: Tensor::zeros(&[c, 3]),
            include_identity: true,
        },
        long_kernel,
    }
}

enum MixerCache {
    Conv(ShortLongCache<f64>),
    Ssm { x_cm: Vec<f64> },
}

fn mixer_forward(m: &Mixer, x: &Tensor) -> Result<(Tensor, MixerCache)> {
    match m {
        Mixer::ShortLong(p) | Mixer::LongConv(p) => {
            let (z, c) = short_long_forward_cached(p, x)?;
            Ok((z, MixerCache::Conv(c)))
        }
        Mixer::Ssm(s) => {
            let (b, l, c) = x.dims3();
            let x_cm = to_channel_major(x.data(), b, l, c);
            let z_cm = s.forward_cm(&x_cm, b, l)?;
            let z = Tensor::from_vec(x.shape(), from_channel_major(&z_cm, b, l, c))?;
            Ok((z, MixerCache::Ssm { x_cm }))
        }
    }
}

/// `(dX, mixer gradients)`; `grads` must be a zeroed copy of `m`.
fn mixer_backward(m: &Mixer, x: &Tensor, cache: &MixerCache, dz: &Tensor, grads: &mut Mixer) -> Result<Tensor> {
    match (m, cache, grads) {
        (Mixer::ShortLong(p), MixerCache::Conv(c), Mixer::ShortLong(g)) => {
            let (dx, sg) = short_long_backward(p, x, c, dz)?;
            g.bank.k3 = sg.k3;
            g.bank.kvar = sg.kvar;
            g.long_kernel = sg.long_kernel;
            Ok(dx)
        }
        (Mixer::LongConv(p), MixerCache::Conv(c), Mixer::LongConv(g)) => {
            let (dx, sg) = short_long_backward(p, x, c, dz)?;
            g.long_kernel = sg.long_kernel;
            Ok(dx)
        }
        (Mixer::Ssm(s), MixerCache::Ssm { x_cm }, Mixer::Ssm(g)) => {
            let (b, l, c) = x.dims3();
            let g_cm = to_channel_major(dz.data(), b, l, c);
            let (dx_cm, dc) = s.backward_cm(x_cm, &g_cm, b, l)?;
            g.c = dc;
            Tensor::from_vec(x.shape(), from_channel_major(&dx_cm, b, l, c))
        }
        _ => Err(ChelaError::InvalidArgument("mixer cache does not match mixer".into())),
    }
}

fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal(0.0, std)).collect()).expect("shape")
}

fn fan_in_weight(rng: &mut Rng, din: usize, dout: usize) -> Tensor {
    normal_tensor(rng, &[din, dout], 1.0 / (din as f64).sqrt())
}

/// Row-major `x W + b` for `n` rows.
fn affine(x: &[f64], n: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(1.0, MatRef::new(x, n, din), MatRef::new(w.data(), din, dout), 1.0, &mut out, dout);
    out
}

/// Accumulates `dW += x^T dy`, `db += colsum(dy)` and, when given,
/// `dx += dy W^T`.
fn affine_backward(x: &[f64], n: usize, w: &Tensor, dy: &[f64], dw: &mut Tensor, db: &mut Tensor, dx: Option<&mut [f64]>) {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    gemm(1.0, MatRef::new(x, n, din).t(), MatRef::new(dy, n, dout), 1.0, dw.data_mut(), dout);
    for row in dy.chunks_exact(dout) {
        for (g, &v) in db.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
    if let Some(dx) = dx {
        gemm(1.0, MatRef::new(dy, n, dout), MatRef::new(w.data(), din, dout).t(), 1.0, dx, din);
    }
}

/// Per-feature affine `alpha * z + beta` over `d`-wide rows.
fn scale_shift(z: &[f64], alpha: &Tensor, beta: &Tensor) -> Vec<f64> {
    let d = alpha.len();
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks_exact(d) {
        for ((&v, &a), &b) in row.iter().zip(alpha.data()).zip(beta.data()) {
            out.push(a * v + b);
        }
    }
    out
}

/// Parameters of one gated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChelaLayerParams {
    pub mixer: Mixer,
    /// `[d, d]`
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_g: Tensor,
    pub b_g: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub alpha_q: Tensor,
    pub beta_q: Tensor,
    pub alpha_k: Tensor,
    pub beta_k: Tensor,
    pub norm_gain: Tensor,
}

impl ChelaLayerParams {
    /// Projections `normal(0, 1/sqrt(d))`, biases and offsets zero, scalers
    /// and the norm gain one.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        let mixer = Mixer::init(cfg.mixer, cfg, rng)?;
        let w_v = fan_in_weight(rng, d, d);
        let w_g = fan_in_weight(rng, d, d);
        let w_o = fan_in_weight(rng, d, d);
        Ok(Self {
            mixer,
            w_v,
            b_v: Tensor::zeros(&[d]),
            w_g,
            b_g: Tensor::zeros(&[d]),
            w_o,
            b_o: Tensor::zeros(&[d]),
            alpha_q: Tensor::full(&[d], 1.0),
            beta_q: Tensor::zeros(&[d]),
            alpha_k: Tensor::full(&[d], 1.0),
            beta_k: Tensor::zeros(&[d]),
            norm_gain: Tensor::full(&[d], 1.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.norm_gain.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        let mats = [&self.w_v, &self.w_g, &self.w_o];
        let vecs = [
            &self.b_v,
            &self.b_g,
            &self.b_o,
            &self.alpha_q,
            &self.beta_q,
            &self.alpha_k,
            &self.beta_k,
        ];
        if mats.iter().any(|m| m.shape() != [d, d]) || vecs.iter().any(|v| v.shape() != [d]) {
            return Err(ChelaError::Shape(format!("layer parameters inconsistent with d = {d}")));
        }
        if self.mixer.channels() != d {
            return Err(ChelaError::Shape(format!(
                "mixer has {} channels, layer dim {d}",
                self.mixer.channels()
            )));
        }
        Ok(())
    }
}

impl Params for ChelaLayerParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("mixer", self.mixer.named());
        v.extend([
            ("w_v".to_string(), &self.w_v),
            ("b_v".to_string(), &self.b_v),
            ("w_g".to_string(), &self.w_g),
            ("b_g".to_string(), &self.b_g),
            ("w_o".to_string(), &self.w_o),
            ("b_o".to_string(), &self.b_o),
            ("alpha_q".to_string(), &self.alpha_q),
            ("beta_q".to_string(), &self.beta_q),
            ("alpha_k".to_string(), &self.alpha_k),
            ("beta_k".to_string(), &self.beta_k),
            ("norm_gain".to_string(), &self.norm_gain),
        ]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.mixer.tensors_mut();
        v.extend([
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_g,
            &mut self.b_g,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.alpha_q,
            &mut self.beta_q,
            &mut self.alpha_k,
            &mut self.beta_k,
            &mut self.norm_gain,
        ]);
        v
    }
}

/// Activations saved by [`chela_layer_forward_cached`].
pub struct LayerCache {
    x: Tensor,
    z: Tensor,
    mixer: MixerCache,
    attn_in: AttentionInputs,
    attn: LinearAttentionCache<f64>,
    attn_out: Vec<f64>,
    v_pre: Vec<f64>,
    g_pre: Vec<f64>,
    g_a: Vec<f64>,
    g_o: Vec<f64>,
    m: Vec<f64>,
}

impl LayerCache {
    /// Output gate values `G_o`, `[B * L * d]`.
    pub fn output_gate(&self) -> &[f64] {
        &self.g_o
    }

    /// Gated attention output `M`.
    pub fn gated_attention(&self) -> &[f64] {
        &self.m
    }
}

pub fn chela_layer_forward(p: &ChelaLayerParams, x: &Tensor, chunk: usize) -> Result<Tensor> {
    chela_layer_forward_cached(p, x, chunk).map(|r| r.0)
}

pub fn chela_layer_forward_cached(p: &ChelaLayerParams, x: &Tensor, chunk: usize) -> Result<(Tensor, LayerCache)> {
    p.validate()?;
    let d = p.dim();
    let (b, l, c) = x.dims3();
    if c != d {
        return Err(ChelaError::Shape(format!("layer input has {c} features, layer dim {d}")));
    }
    if chunk == 0 {
        return Err(ChelaError::InvalidArgument("chunk size must be >= 1".into()));
    }
    let n = b * l;
    let shape = [b, l, d];
    let x = x.clone().reshape(&shape)?;
    let (z, mixer) = mixer_forward(&p.mixer, &x)?;
    let q = scale_shift(z.data(), &p.alpha_q, &p.beta_q);
    let k = scale_shift(z.data(), &p.alpha_k, &p.beta_k);
    let v_pre = affine(x.data(), n, &p.w_v, &p.b_v);
    let v: Vec<f64> = v_pre.iter().map(|&s| silu(s)).collect();
    let attn_in = AttentionInputs::new(
        Tensor::from_vec(&shape, q)?,
        Tensor::from_vec(&shape, k)?,
        Tensor::from_vec(&shape, v)?,
    )?;
    let norm = AttnNorm {
        gain: p.norm_gain.data().to_vec(),
        eps: RMS_EPS,
    };
    let (attn_out, attn) = linear_attention_forward_cached(LinearForm::Chunked(chunk), &attn_in, &norm)?;
    let attn_out = attn_out.into_data();
    let g_pre = affine(z.data(), n, &p.w_g, &p.b_g);
    let g_a: Vec<f64> = g_pre.iter().map(|&s| silu(s)).collect();
    let o_pre = affine(z.data(), n, &p.w_o, &p.b_o);
    let g_o: Vec<f64> = o_pre.iter().map(|&s| sigmoid(s)).collect();
    let m: Vec<f64> = attn_out.iter().zip(&g_a).map(|(a, g)| a * g).collect();
    let u: Vec<f64> = m
        .iter()
        .zip(&g_o)
        .zip(x.data())
        .map(|((&mv, &go), &xv)| mv * go + xv * (1.0 - go))
        .collect();
    let u = Tensor::from_vec(&shape, u)?;
    Ok((
        u,
        LayerCache {
            x,
            z,
            mixer,
            attn_in,
            attn,
            attn_out,
            v_pre,
            g_pre,
            g_a,
            g_o,
            m,
        },
    ))
}

/// Reverse pass: `(dX, parameter gradients)`.
pub fn chela_layer_backward(
    p: &ChelaLayerParams,
    cache: &LayerCache,
    du: &Tensor,
    chunk: usize,
) -> Result<(Tensor, ChelaLayerParams)> {
    let d = p.dim();
    let shape = cache.x.shape().to_vec();
    let n = cache.x.len() / d;
    if du.len() != cache.x.len() {
        return Err(ChelaError::Shape(format!("layer cotangent {:?} vs input {:?}", du.shape(), shape)));
    }
    let mut g = p.zeroed();
    let x = cache.x.data();
    let z = cache.z.data();
    let du = du.data();

    let mut dx = vec![0.0; x.len()];
    let mut dm = vec![0.0; x.len()];
    let mut do_pre = vec![0.0; x.len()];
    for i in 0..x.len() {
        let go = cache.g_o[i];
        dm[i] = du[i] * go;
        dx[i] = du[i] * (1.0 - go);
        do_pre[i] = du[i] * (cache.m[i] - x[i]) * go * (1.0 - go);
    }
    let mut d_attn = vec![0.0; x.len()];
    let mut dg_pre = vec![0.0; x.len()];
    for i in 0..x.len() {
        d_attn[i] = dm[i] * cache.g_a[i];
        dg_pre[i] = dm[i] * cache.attn_out[i] * silu_grad(cache.g_pre[i]);
    }
    let norm = AttnNorm {
        gain: p.norm_gain.data().to_vec(),
        eps: RMS_EPS,
    };
    let ag = linear_attention_backward(
        LinearForm::Chunked(chunk),
        &cache.attn_in,
        &norm,
        &cache.attn,
        &Tensor::from_vec(&shape, d_attn)?,
    )?;
    g.norm_gain.data_mut().copy_from_slice(&ag.dgain);

    let dv_pre: Vec<f64> = ag
        .dv
        .data()
        .iter()
        .zip(&cache.v_pre)
        .map(|(&gv, &s)| gv * silu_grad(s))
        .collect();
    affine_backward(x, n, &p.w_v, &dv_pre, &mut g.w_v, &mut g.b_v, Some(&mut dx));

    let mut dz = vec![0.0; x.len()];
    for (r, ((zr, dqr), dkr)) in z
        .chunks_exact(d)
        .zip(ag.dq.data().chunks_exact(d))
        .zip(ag.dk.data().chunks_exact(d))
        .enumerate()
    {
        for j in 0..d {
            dz[r * d + j] = dqr[j] * p.alpha_q.data()[j] + dkr[j] * p.alpha_k.data()[j];
            g.alpha_q.data_mut()[j] += dqr[j] * zr[j];
            g.beta_q.data_mut()[j] += dqr[j];
            g.alpha_k.data_mut()[j] += dkr[j] * zr[j];
            g.beta_k.data_mut()[j] += dkr[j];
        }
    }
    affine_backward(z, n, &p.w_g, &dg_pre, &mut g.w_g, &mut g.b_g, Some(&mut dz));
    affine_backward(z, n, &p.w_o, &do_pre, &mut g.w_o, &mut g.b_o, Some(&mut dz));

    let dz = Tensor::from_vec(&shape, dz)?;
    let dx_mix = mixer_backward(&p.mixer, &cache.x, &cache.mixer, &dz, &mut g.mixer)?;
    for (a, &b) in dx.iter_mut().zip(dx_mix.data()) {
        *a += b;
    }
    Ok((Tensor::from_vec(&shape, dx)?, g))
}

/// Layer plus pre-norms and the feed-forward sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChelaBlockParams {
    pub layer: ChelaLayerParams,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    /// `[d, 2d]`
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    /// `[2d, d]`
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

impl ChelaBlockParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        let layer = ChelaLayerParams::init(cfg, rng)?;
        let ffn_w1 = fan_in_weight(rng, d, 2 * d);
        let ffn_w2 = fan_in_weight(rng, 2 * d, d);
        Ok(Self {
            layer,
            ln1_g: Tensor::full(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            ln2_g: Tensor::full(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            ffn_w1,
            ffn_b1: Tensor::zeros(&[2 * d]),
            ffn_w2,
            ffn_b2: Tensor::zeros(&[d]),
        })
    }

    pub fn dim(&self) -> usize {
        self.layer.dim()
    }
}

impl Params for ChelaBlockParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("layer", self.layer.named());
        v.extend([
            ("ln1_g".to_string(), &self.ln1_g),
            ("ln1_b".to_string(), &self.ln1_b),
            ("ln2_g".to_string(), &self.ln2_g),
            ("ln2_b".to_string(), &self.ln2_b),
            ("ffn_w1".to_string(), &self.ffn_w1),
            ("ffn_b1".to_string(), &self.ffn_b1),
            ("ffn_w2".to_string(), &self.ffn_w2),
            ("ffn_b2".to_string(), &self.ffn_b2),
        ]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.layer.tensors_mut();
        v.extend([
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
        ]);
        v
    }
}

pub struct BlockCache {
    x: Vec<f64>,
    ln1_stats: Vec<f64>,
    layer: LayerCache,
    xa: Vec<f64>,
    ln2: Vec<f64>,
    ln2_stats: Vec<f64>,
    h_pre: Vec<f64>,
    h: Vec<f64>,
    shape: Vec<usize>,
}

fn ln_forward(x: &[f64], gain: &Tensor, bias: &Tensor, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut stats = vec![0.0; 2 * (x.len() / d)];
    layer_norm_rows(x, gain.data(), bias.data(), LN_EPS, d, &mut out, &mut stats);
    (out, stats)
}

pub fn chela_block_forward(p: &ChelaBlockParams, x: &Tensor, chunk: usize) -> Result<Tensor> {
    chela_block_forward_cached(p, x, chunk).map(|r| r.0)
}

pub fn chela_block_forward_cached(p: &ChelaBlockParams, x: &Tensor, chunk: usize) -> Result<(Tensor, BlockCache)> {
    let d = p.dim();
    let (b, l, c) = x.dims3();
    if c != d {
        return Err(ChelaError::Shape(format!("block input has {c} features, block dim {d}")));
    }
    let shape = vec![b, l, d];
    let n = b * l;
    let (ln1, ln1_stats) = ln_forward(x.data(), &p.ln1_g, &p.ln1_b, d);
    let (xa, layer) = chela_layer_forward_cached(&p.layer, &Tensor::from_vec(&shape, ln1)?, chunk)?;
    let xa = xa.into_data();
    let (ln2, ln2_stats) = ln_forward(&xa, &p.ln2_g, &p.ln2_b, d);
    let h_pre = affine(&ln2, n, &p.ffn_w1, &p.ffn_b1);
    let h: Vec<f64> = h_pre.iter().map(|&s| silu(s)).collect();
    let mut y = affine(&h, n, &p.ffn_w2, &p.ffn_b2);
    for (a, &r) in y.iter_mut().zip(&xa) {
        *a += r;
    }
    let y = Tensor::from_vec(&shape, y)?;
    Ok((
        y,
        BlockCache {
            x: x.data().to_vec(),
            ln1_stats,
            layer,
            xa,
            ln2,
            ln2_stats,
            h_pre,
            h,
            shape,
        },
    ))
}

pub fn chela_block_backward(
    p: &ChelaBlockParams,
    cache: &BlockCache,
    dy: &Tensor,
    chunk: usize,
) -> Result<(Tensor, ChelaBlockParams)> {
    let d = p.dim();
    let n = cache.x.len() / d;
    if dy.len() != cache.x.len() {
        return Err(ChelaError::Shape("block cotangent does not match input".into()));
    }
    let mut g = p.zeroed();
    let dy = dy.data();
    let mut dh = vec![0.0; n * 2 * d];
    affine_backward(&cache.h, n, &p.ffn_w2, dy, &mut g.ffn_w2, &mut g.ffn_b2, Some(&mut dh));
    let dh_pre: Vec<f64> = dh.iter().zip(&cache.h_pre).map(|(&gv, &s)| gv * silu_grad(s)).collect();
    let mut dln2 = vec![0.0; n * d];
    affine_backward(&cache.ln2, n, &p.ffn_w1, &dh_pre, &mut g.ffn_w1, &mut g.ffn_b1, Some(&mut dln2));
    let mut dxa = vec![0.0; n * d];
    layer_norm_rows_backward(
        &cache.xa,
        p.ln2_g.data(),
        &cache.ln2_stats,
        &dln2,
        d,
        &mut dxa,
        g.ln2_g.data_mut(),
        g.ln2_b.data_mut(),
    );
    for (a, &r) in dxa.iter_mut().zip(dy) {
        *a += r;
    }
    let (dln1, gl) = chela_layer_backward(&p.layer, &cache.layer, &Tensor::from_vec(&cache.shape, dxa)?, chunk)?;
    g.layer = gl;
    let mut dx = vec![0.0; n * d];
    layer_norm_rows_backward(
        &cache.x,
        p.ln1_g.data(),
        &cache.ln1_stats,
        dln1.data(),
        d,
        &mut dx,
        g.ln1_g.data_mut(),
        g.ln1_b.data_mut(),
    );
    Ok((Tensor::from_vec(&cache.shape, dx)?, g))
}

/// Model input: token ids `[batch, len]` or features `[batch, len, input_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    Tokens { ids: Vec<usize>, batch: usize, len: usize },
    Features(Tensor),
}

impl ModelInput {
    pub fn tokens(ids: Vec<usize>, batch: usize, len: usize) -> Result<Self> {
        if ids.len() != batch * len || batch == 0 || len == 0 {
            return Err(ChelaError::Shape(format!("{} token ids for batch {batch} x len {len}", ids.len())));
        }
        Ok(ModelInput::Tokens { ids, batch, len })
    }

    pub fn batch_len(&self) -> (usize, usize) {
        match self {
            ModelInput::Tokens { batch, len, .. } => (*batch, *len),
            ModelInput::Features(t) => {
                let (b, l, _) = t.dims3();
                (b, l)
            }
        }
    }
}

/// All trainable tensors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `[vocab, d]` token table or `[input_dim, d]` feature lift.
    pub embed: Tensor,
    /// Bias of the feature lift; absent for token tables.
    pub embed_b: Option<Tensor>,
    pub blocks: Vec<ChelaBlockParams>,
    /// `[d, out]`
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Params for ModelParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("embed".to_string(), &self.embed)];
        if let Some(b) = &self.embed_b {
            v.push(("embed_b".to_string(), b));
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), blk.named()));
        }
        v.push(("head_w".to_string(), &self.head_w));
        v.push(("head_b".to_string(), &self.head_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embed];
        if let Some(b) = &mut self.embed_b {
            v.push(b);
        }
        for blk in &mut self.blocks {
            v.extend(blk.tensors_mut());
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }
}

/// Draws every parameter from `rng` in a fixed order.
pub fn init_chela_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let d = cfg.d_model;
    let (embed, embed_b) = if cfg.uses_tokens() {
        (normal_tensor(rng, &[cfg.vocab_size, d], 1.0), None)
    } else {
        (fan_in_weight(rng, cfg.input_dim, d), Some(Tensor::zeros(&[d])))
    };
    let blocks = (0..cfg.depth)
        .map(|_| ChelaBlockParams::init(cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    let out = cfg.output_dim();
    let head_w = fan_in_weight(rng, d, out);
    Ok(ModelParams {
        embed,
        embed_b,
        blocks,
        head_w,
        head_b: Tensor::zeros(&[out]),
    })
}

/// A configured model: shape plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ChelaModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

pub struct ModelCache {
    input: ModelInput,
    blocks: Vec<BlockCache>,
    last: Vec<f64>,
    batch: usize,
    len: usize,
}

impl ChelaModel {
    /// Initializes from `config.seed`. Parameters are rounded to `f32` so
    /// they round-trip exactly through checkpoints.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = Rng::new(config.seed);
        let mut params = init_chela_params(&config, &mut rng)?;
        for t in params.tensors_mut() {
            t.round_to_f32();
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn embed(&self, input: &ModelInput) -> Result<(Vec<f64>, usize, usize)> {
        let d = self.config.d_model;
        let (b, l) = input.batch_len();
        if l > self.config.max_len {
            return Err(ChelaError::LengthExceeded { len: l, max: self.config.max_len });
        }
        match (input, &self.params.embed_b) {
            (ModelInput::Tokens { ids, .. }, None) => {
                let vocab = self.config.vocab_size;
                let mut h = Vec::with_capacity(ids.len() * d);
                for &t in ids {
                    if t >= vocab {
                        return Err(ChelaError::OutOfVocabulary { token: t, vocab });
                    }
                    h.extend_from_slice(&self.params.embed.data()[t * d..(t + 1) * d]);
                }
                Ok((h, b, l))
            }
            (ModelInput::Features(x), Some(bias)) => {
                let f = x.dims3().2;
                if f != self.config.input_dim {
                    return Err(ChelaError::Shape(format!(
                        "features have {f} channels, model expects {}",
                        self.config.input_dim
                    )));
                }
                x.ensure_finite("model features")?;
                Ok((affine(x.data(), b * l, &self.params.embed, bias), b, l))
            }
            (ModelInput::Tokens { .. }, Some(_)) => {
                Err(ChelaError::InvalidArgument("model reads features, got tokens".into()))
            }
            (ModelInput::Features(_), None) => {
                Err(ChelaError::InvalidArgument("model reads tokens, got features".into()))
            }
        }
    }

    pub fn forward(&self, input: &ModelInput) -> Result<Tensor> {
        self.forward_cached(input).map(|r| r.0)
    }

    /// Outputs: `[B, L, vocab]` (lm), `[B, classes]` (classification) or
    /// `[B, 1]` (regression).
    pub fn forward_cached(&self, input: &ModelInput) -> Result<(Tensor, ModelCache)> {
        let d = self.config.d_model;
        let chunk = self.config.chunk;
        let (mut h, b, l) = self.embed(input)?;
        let mut caches = Vec::with_capacity(self.params.blocks.len());
        for blk in &self.params.blocks {
            let (y, c) = chela_block_forward_cached(blk, &Tensor::from_vec(&[b, l, d], h)?, chunk)?;
            h = y.into_data();
            caches.push(c);
        }
        let out = self.config.output_dim();
        let (pw, pb) = (&self.params.head_w, &self.params.head_b);
        let y = match self.config.task_head {
            TaskHead::Lm => Tensor::from_vec(&[b, l, out], affine(&h, b * l, pw, pb))?,
            TaskHead::Classification => {
                let pooled = mean_pool(&h, b, l, d);
                Tensor::from_vec(&[b, out], affine(&pooled, b, pw, pb))?
            }
            TaskHead::Regression => {
                let last = last_rows(&h, b, l, d);
                Tensor::from_vec(&[b, out], affine(&last, b, pw, pb))?
            }
        };
        y.ensure_finite("model output")?;
        Ok((
            y,
            ModelCache {
                input: input.clone(),
                blocks: caches,
                last: h,
                batch: b,
                len: l,
            },
        ))
    }

    /// Gradients of `<dout, forward(input)>` with respect to every parameter.
    pub fn backward(&self, cache: &ModelCache, dout: &Tensor) -> Result<ModelParams> {
        let d = self.config.d_model;
        let (b, l) = (cache.batch, cache.len);
        let n = b * l;
        let mut g = self.params.zeroed();
        let (pw, h) = (&self.params.head_w, &cache.last);
        let out = self.config.output_dim();
        let expect = match self.config.task_head {
            TaskHead::Lm => n * out,
            _ => b * out,
        };
        if dout.len() != expect {
            return Err(ChelaError::Shape(format!("output cotangent has {} values, expected {expect}", dout.len())));
        }
        let mut dh = vec![0.0; n * d];
        match self.config.task_head {
            TaskHead::Lm => affine_backward(h, n, pw, dout.data(), &mut g.head_w, &mut g.head_b, Some(&mut dh)),
            TaskHead::Classification => {
                let pooled = mean_pool(h, b, l, d);
                let mut dp = vec![0.0; b * d];
                affine_backward(&pooled, b, pw, dout.data(), &mut g.head_w, &mut g.head_b, Some(&mut dp));
                let inv = 1.0 / l as f64;
                for bi in 0..b {
                    for t in 0..l {
                        for j in 0..d {
                            dh[(bi * l + t) * d + j] = dp[bi * d + j] * inv;
                        }
                    }
                }
            }
            TaskHead::Regression => {
                let last = last_rows(h, b, l, d);
                let mut dl = vec![0.0; b * d];
                affine_backward(&last, b, pw, dout.data(), &mut g.head_w, &mut g.head_b, Some(&mut dl));
                for bi in 0..b {
                    let row = (bi * l + l - 1) * d;
                    dh[row..row + d].copy_from_slice(&dl[bi * d..(bi + 1) * d]);
                }
            }
        }
        for (i, blk) in self.params.blocks.iter().enumerate().rev() {
            let (dx, gb) =
                chela_block_backward(blk, &cache.blocks[i], &Tensor::from_vec(&[b, l, d], dh)?, self.config.chunk)?;
            g.blocks[i] = gb;
            dh = dx.into_data();
        }
        match &cache.input {
            ModelInput::Tokens { ids, .. } => {
                let ge = g.embed.data_mut();
                for (r, &t) in ids.iter().enumerate() {
                    for j in 0..d {
                        ge[t * d + j] += dh[r * d + j];
                    }
                }
            }
            ModelInput::Features(x) => {
                let gb = g.embed_b.as_mut().expect("feature model has a lift bias");
                affine_backward(x.data(), n, &self.params.embed, &dh, &mut g.embed, gb, None);
            }
        }
        Ok(g)
    }
}

fn mean_pool(h: &[f64], b: usize, l: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * d];
    for bi in 0..b {
        for t in 0..l {
            for j in 0..d {
                out[bi * d + j] += h[(bi * l + t) * d + j];
            }
        }
    }
    let inv = 1.0 / l as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

fn last_rows(h: &[f64], b: usize, l: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * d);
    for bi in 0..b {
        let row = (bi * l + l - 1) * d;
        out.extend_from_slice(&h[row..row + d]);
    }
    out
}

/// Closed-form parameter count for a configuration.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let mixer = match cfg.mixer {
        MixerKind::ShortLong => d * (3 + short_kernel_size(cfg.max_len) + cfg.max_len),
        MixerKind::LongConv => d * cfg.max_len,
        MixerKind::Ssm => d * cfg.ssm_state_dim,
    };
    let layer = mixer + 3 * (d * d + d) + 5 * d;
    let block = layer + 4 * d + (d * 2 * d + 2 * d) + (2 * d * d + d);
    let embed = if cfg.uses_tokens() {
        cfg.vocab_size * d
    } else {
        cfg.input_dim * d + d
    };
    let out = cfg.output_dim();
    embed + cfg.depth * block + d * out + out
}
