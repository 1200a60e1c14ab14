//! [`DifferentiableOp`] adapters for every op with a hand-written backward,
//! and the gradient suite that runs them all through [`vjp_check`].

use crate::attention::{
    linear_attention_backward, linear_attention_forward_cached, softmax_attention, softmax_attention_backward,
    AttentionInputs, AttnNorm, LinearForm,
};
use crate::conv::{
    causal_conv_direct, causal_conv_fft, causal_conv_vjp, from_channel_major, short_long_backward,
    short_long_forward_cached, to_channel_major, FftConv, ShortConvBank, ShortLongConvParams,
};
use crate::error::{ChelaError, Result};
use crate::layer::{
    chela_block_backward, chela_block_forward, chela_block_forward_cached, chela_layer_backward, chela_layer_forward,
    chela_layer_forward_cached, ChelaBlockParams, ChelaLayerParams, ChelaModel, MixerKind, ModelConfig, ModelInput,
    Params, TaskHead,
};
use crate::numerics::ops::{
    activation, activation_vjp, layer_norm_rows, layer_norm_rows_backward, rms_norm_rows, rms_norm_rows_backward,
    ActivationKind, LN_EPS, RMS_EPS,
};
use crate::numerics::{vjp_check, DifferentiableOp, Rng, Tensor};
use crate::ssm::SsmMixer;
use crate::train::{cross_entropy, mse};

/// Finite-difference step used by the suite.
pub const GRAD_STEP: f64 = 1e-5;
/// Maximum relative error accepted by the suite.
pub const GRAD_TOL: f64 = 1e-4;

fn scalar_out(v: f64) -> Result<Tensor> {
    Tensor::from_vec(&[1], vec![v])
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("rank >= 1")
}

pub struct Activation(pub ActivationKind);

impl DifferentiableOp for Activation {
    fn name(&self) -> &str {
        match self.0 {
            ActivationKind::Silu => "silu",
            ActivationKind::Sigmoid => "sigmoid",
        }
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        activation(self.0, &inputs[0])
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![activation_vjp(self.0, &inputs[0], cot)?])
    }
}

/// Row-wise RMS norm; inputs `[x, gain]`.
pub struct RmsNorm;

impl DifferentiableOp for RmsNorm {
    fn name(&self) -> &str {
        "rms_norm"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let (x, g) = (&inputs[0], &inputs[1]);
        let d = last_dim(x);
        let mut out = vec![0.0; x.len()];
        let mut inv = vec![0.0; x.len() / d];
        rms_norm_rows(x.data(), g.data(), RMS_EPS, d, &mut out, &mut inv);
        Tensor::from_vec(x.shape(), out)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let (x, g) = (&inputs[0], &inputs[1]);
        let d = last_dim(x);
        let mut out = vec![0.0; x.len()];
        let mut inv = vec![0.0; x.len() / d];
        rms_norm_rows(x.data(), g.data(), RMS_EPS, d, &mut out, &mut inv);
        let mut dx = vec![0.0; x.len()];
        let mut dg = Tensor::zeros(g.shape());
        rms_norm_rows_backward(x.data(), g.data(), &inv, cot.data(), d, &mut dx, dg.data_mut());
        Ok(vec![Tensor::from_vec(x.shape(), dx)?, dg])
    }
}

/// Row-wise layer norm; inputs `[x, gain, bias]`.
pub struct LayerNorm;

impl LayerNorm {
    fn run(inputs: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
        let (x, g, b) = (&inputs[0], &inputs[1], &inputs[2]);
        let d = last_dim(x);
        let mut out = vec![0.0; x.len()];
        let mut stats = vec![0.0; 2 * x.len() / d];
        layer_norm_rows(x.data(), g.data(), b.data(), LN_EPS, d, &mut out, &mut stats);
        (out, stats)
    }
}

impl DifferentiableOp for LayerNorm {
    fn name(&self) -> &str {
        "layer_norm"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Tensor::from_vec(inputs[0].shape(), Self::run(inputs).0)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let (x, g) = (&inputs[0], &inputs[1]);
        let d = last_dim(x);
        let (_, stats) = Self::run(inputs);
        let mut dx = vec![0.0; x.len()];
        let mut dg = Tensor::zeros(g.shape());
        let mut db = Tensor::zeros(g.shape());
        layer_norm_rows_backward(x.data(), g.data(), &stats, cot.data(), d, &mut dx, dg.data_mut(), db.data_mut());
        Ok(vec![Tensor::from_vec(x.shape(), dx)?, dg, db])
    }
}

/// 1-D causal convolution; inputs `[kernel, x]`.
pub struct CausalConvDirect;

impl DifferentiableOp for CausalConvDirect {
    fn name(&self) -> &str {
        "causal_conv_direct"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Tensor::from_vec(inputs[1].shape(), causal_conv_direct(inputs[0].data(), inputs[1].data()))
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let (dx, dk) = causal_conv_vjp(inputs[0].data(), inputs[1].data(), cot.data());
        Ok(vec![Tensor::from_vec(inputs[0].shape(), dk)?, Tensor::from_vec(inputs[1].shape(), dx)?])
    }
}

/// 1-D causal convolution through the FFT, with spectral adjoints; inputs
/// `[kernel, x]`.
pub struct CausalConvFft;

impl DifferentiableOp for CausalConvFft {
    fn name(&self) -> &str {
        "causal_conv_fft"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Tensor::from_vec(inputs[1].shape(), causal_conv_fft(inputs[0].data(), inputs[1].data())?)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let (k, x) = (inputs[0].data(), inputs[1].data());
        let conv = FftConv::new(x.len(), k.len())?;
        let mut dx = vec![0.0; x.len()];
        conv.adjoint_input(&conv.kernel_spectrum(k), cot.data(), &mut dx);
        let mut dk = vec![0.0; k.len()];
        conv.adjoint_kernel(&conv.spectrum(x), cot.data(), &mut dk);
        Ok(vec![Tensor::from_vec(inputs[0].shape(), dk)?, Tensor::from_vec(inputs[1].shape(), dx)?])
    }
}

/// Short-long convolution; inputs `[x, k3, kvar, long_kernel]`.
pub struct ShortLong {
    pub include_identity: bool,
}

impl ShortLong {
    fn params(&self, inputs: &[Tensor]) -> ShortLongConvParams {
        ShortLongConvParams {
            bank: ShortConvBank {
                k3: inputs[1].clone(),
                kvar: inputs[2].clone(),
                include_identity: self.include_identity,
            },
            long_kernel: inputs[3].clone(),
        }
    }
}

impl DifferentiableOp for ShortLong {
    fn name(&self) -> &str {
        "short_long_conv"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        short_long_forward_cached(&self.params(inputs), &inputs[0]).map(|r| r.0)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let p = self.params(inputs);
        let (_, cache) = short_long_forward_cached(&p, &inputs[0])?;
        let (dx, g) = short_long_backward(&p, &inputs[0], &cache, cot)?;
        Ok(vec![dx, g.k3, g.kvar, g.long_kernel])
    }
}

/// Normalized linear attention in a given form; inputs `[q, k, v, gain]`.
pub struct LinearAttention(pub LinearForm);

impl LinearAttention {
    fn split(inputs: &[Tensor]) -> Result<(AttentionInputs, AttnNorm)> {
        let inp = AttentionInputs::new(inputs[0].clone(), inputs[1].clone(), inputs[2].clone())?;
        let norm = AttnNorm {
            gain: inputs[3].data().to_vec(),
            eps: RMS_EPS,
        };
        Ok((inp, norm))
    }
}

impl DifferentiableOp for LinearAttention {
    fn name(&self) -> &str {
        match self.0 {
            LinearForm::Noncausal => "linear_attention_noncausal",
            LinearForm::Recurrent => "linear_attention_recurrent",
            LinearForm::Chunked(_) => "linear_attention_chunked",
        }
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let (inp, norm) = Self::split(inputs)?;
        linear_attention_forward_cached(self.0, &inp, &norm).map(|r| r.0)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let (inp, norm) = Self::split(inputs)?;
        let (_, cache) = linear_attention_forward_cached(self.0, &inp, &norm)?;
        let g = linear_attention_backward(self.0, &inp, &norm, &cache, cot)?;
        Ok(vec![g.dq, g.dk, g.dv, Tensor::from_vec(inputs[3].shape(), g.dgain)?])
    }
}

/// Scaled dot-product softmax attention; inputs `[q, k, v]`.
pub struct SoftmaxAttention {
    pub causal: bool,
}

impl DifferentiableOp for SoftmaxAttention {
    fn name(&self) -> &str {
        if self.causal {
            "softmax_attention_causal"
        } else {
            "softmax_attention"
        }
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let inp = AttentionInputs::new(inputs[0].clone(), inputs[1].clone(), inputs[2].clone())?;
        softmax_attention(&inp, self.causal)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let inp = AttentionInputs::new(inputs[0].clone(), inputs[1].clone(), inputs[2].clone())?;
        let (dq, dk, dv) = softmax_attention_backward(&inp, self.causal, cot)?;
        Ok(vec![dq, dk, dv])
    }
}

/// SSM mixer with a trainable read-out; inputs `[x, c]`.
pub struct Ssm {
    pub template: SsmMixer,
}

impl Ssm {
    fn mixer(&self, c: &Tensor) -> SsmMixer {
        let mut m = self.template.clone();
        m.c = c.clone();
        m
    }
}

impl DifferentiableOp for Ssm {
    fn name(&self) -> &str {
        "ssm_mixer"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let x = &inputs[0];
        let (b, l, c) = x.dims3();
        let y = self.mixer(&inputs[1]).forward_cm(&to_channel_major(x.data(), b, l, c), b, l)?;
        Tensor::from_vec(x.shape(), from_channel_major(&y, b, l, c))
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = &inputs[0];
        let (b, l, c) = x.dims3();
        let xc = to_channel_major(x.data(), b, l, c);
        let gc = to_channel_major(cot.data(), b, l, c);
        let (dx, dc) = self.mixer(&inputs[1]).backward_cm(&xc, &gc, b, l)?;
        Ok(vec![Tensor::from_vec(x.shape(), from_channel_major(&dx, b, l, c))?, dc])
    }
}

/// Gated CHELA layer; inputs `[x, parameters...]` in [`Params::named`] order.
pub struct Layer {
    pub template: ChelaLayerParams,
    pub chunk: usize,
}

impl Layer {
    fn params(&self, inputs: &[Tensor]) -> Result<ChelaLayerParams> {
        let mut p = self.template.clone();
        p.assign(&inputs[1..])?;
        Ok(p)
    }
}

impl DifferentiableOp for Layer {
    fn name(&self) -> &str {
        "chela_layer"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        chela_layer_forward(&self.params(inputs)?, &inputs[0], self.chunk)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let p = self.params(inputs)?;
        let (_, cache) = chela_layer_forward_cached(&p, &inputs[0], self.chunk)?;
        let (dx, g) = chela_layer_backward(&p, &cache, cot, self.chunk)?;
        let mut out = vec![dx];
        out.extend(g.flat());
        Ok(out)
    }
}

/// Pre-norm block; inputs `[x, parameters...]`.
pub struct Block {
    pub template: ChelaBlockParams,
    pub chunk: usize,
}

impl Block {
    fn params(&self, inputs: &[Tensor]) -> Result<ChelaBlockParams> {
        let mut p = self.template.clone();
        p.assign(&inputs[1..])?;
        Ok(p)
    }
}

impl DifferentiableOp for Block {
    fn name(&self) -> &str {
        "chela_block"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        chela_block_forward(&self.params(inputs)?, &inputs[0], self.chunk)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let p = self.params(inputs)?;
        let (_, cache) = chela_block_forward_cached(&p, &inputs[0], self.chunk)?;
        let (dx, g) = chela_block_backward(&p, &cache, cot, self.chunk)?;
        let mut out = vec![dx];
        out.extend(g.flat());
        Ok(out)
    }
}

/// Full model on a fixed input; inputs are the parameters.
pub struct Model {
    pub template: ChelaModel,
    pub input: ModelInput,
}

impl Model {
    fn model(&self, inputs: &[Tensor]) -> Result<ChelaModel> {
        let mut m = self.template.clone();
        m.params.assign(inputs)?;
        Ok(m)
    }
}

impl DifferentiableOp for Model {
    fn name(&self) -> &str {
        "chela_model"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        self.model(inputs)?.forward(&self.input)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let m = self.model(inputs)?;
        let (_, cache) = m.forward_cached(&self.input)?;
        Ok(m.backward(&cache, cot)?.flat())
    }
}

/// Masked cross-entropy as a scalar function of the logits.
pub struct CrossEntropy {
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl DifferentiableOp for CrossEntropy {
    fn name(&self) -> &str {
        "cross_entropy"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        scalar_out(cross_entropy(&inputs[0], &self.targets, &self.mask)?.loss)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = cross_entropy(&inputs[0], &self.targets, &self.mask)?.grad;
        g.scale(cot.data()[0]);
        Ok(vec![g])
    }
}

/// Mean-squared error as a scalar function of the predictions.
pub struct Mse {
    pub targets: Vec<f64>,
}

impl DifferentiableOp for Mse {
    fn name(&self) -> &str {
        "mse"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        scalar_out(mse(&inputs[0], &self.targets)?.loss)
    }

    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = mse(&inputs[0], &self.targets)?.grad;
        g.scale(cot.data()[0]);
        Ok(vec![g])
    }
}

/// Result of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error <= GRAD_TOL
    }
}

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal(0.0, std)).collect()).expect("shape")
}

fn check(out: &mut Vec<GradCase>, label: String, op: &dyn DifferentiableOp, inputs: &[Tensor]) -> Result<()> {
    let error = vjp_check(op, inputs, GRAD_STEP)?;
    out.push(GradCase { name: label, error });
    Ok(())
}

fn tiny_config(mixer: MixerKind, seed: u64) -> ModelConfig {
    ModelConfig {
        mixer,
        chunk: 3,
        ..ModelConfig::lm(2, 6, 8, 5, seed)
    }
}

/// Runs every adapter at small random shapes. Returns one entry per case;
/// callers compare against [`GRAD_TOL`].
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();

    let x = randn(&mut rng, &[2, 3, 5], 2.0);
    for kind in [ActivationKind::Silu, ActivationKind::Sigmoid] {
        let op = Activation(kind);
        check(&mut out, op.name().into(), &op, &[x.clone()])?;
    }
    let gain = randn(&mut rng, &[5], 1.0);
    check(&mut out, "rms_norm".into(), &RmsNorm, &[x.clone(), gain.clone()])?;
    let bias = randn(&mut rng, &[5], 1.0);
    check(&mut out, "layer_norm".into(), &LayerNorm, &[x.clone(), gain, bias])?;

    for (k, l) in [(1, 9), (3, 9), (9, 9), (4, 13)] {
        let inputs = [randn(&mut rng, &[k], 1.0), randn(&mut rng, &[l], 1.0)];
        check(&mut out, format!("causal_conv_direct k={k} L={l}"), &CausalConvDirect, &inputs)?;
        check(&mut out, format!("causal_conv_fft k={k} L={l}"), &CausalConvFft, &inputs)?;
    }

    for identity in [true, false] {
        let (b, l, c, kv) = (2, 10, 3, 5);
        let inputs = [
            randn(&mut rng, &[b, l, c], 1.0),
            randn(&mut rng, &[c, 3], 0.5),
            randn(&mut rng, &[c, kv], 0.5),
            randn(&mut rng, &[c, 12], 0.3),
        ];
        let op = ShortLong {
            include_identity: identity,
        };
        check(&mut out, format!("short_long_conv identity={identity}"), &op, &inputs)?;
    }

    for form in [LinearForm::Noncausal, LinearForm::Recurrent, LinearForm::Chunked(1), LinearForm::Chunked(3)] {
        let (b, l, d) = (2, 7, 4);
        let inputs = [
            randn(&mut rng, &[b, l, d], 1.0),
            randn(&mut rng, &[b, l, d], 1.0),
            randn(&mut rng, &[b, l, d], 1.0),
            randn(&mut rng, &[d], 1.0),
        ];
        let op = LinearAttention(form);
        check(&mut out, format!("{} {form:?}", op.name()), &op, &inputs)?;
    }

    for causal in [false, true] {
        let inputs = [
            randn(&mut rng, &[2, 6, 4], 1.0),
            randn(&mut rng, &[2, 6, 4], 1.0),
            randn(&mut rng, &[2, 6, 4], 1.0),
        ];
        let op = SoftmaxAttention { causal };
        check(&mut out, op.name().into(), &op, &inputs)?;
    }

    let template = SsmMixer::init(3, 4, 0.05, 10, &mut rng)?;
    let inputs = [randn(&mut rng, &[2, 10, 3], 1.0), template.c.clone()];
    check(&mut out, "ssm_mixer".into(), &Ssm { template }, &inputs)?;

    for mixer in [MixerKind::ShortLong, MixerKind::LongConv, MixerKind::Ssm] {
        let cfg = tiny_config(mixer, rng.next_u64());
        let mut prng = Rng::new(cfg.seed);
        let x = randn(&mut rng, &[2, 7, cfg.d_model], 1.0);

        let layer = ChelaLayerParams::init(&cfg, &mut prng)?;
        let mut inputs = vec![x.clone()];
        inputs.extend(layer.flat());
        let op = Layer {
            template: layer,
            chunk: cfg.chunk,
        };
        check(&mut out, format!("chela_layer {mixer:?}"), &op, &inputs)?;

        let block = ChelaBlockParams::init(&cfg, &mut prng)?;
        let mut inputs = vec![x];
        inputs.extend(block.flat());
        let op = Block {
            template: block,
            chunk: cfg.chunk,
        };
        check(&mut out, format!("chela_block {mixer:?}"), &op, &inputs)?;
    }

    let cfg = tiny_config(MixerKind::ShortLong, rng.next_u64());
    let ids: Vec<usize> = (0..2 * 7).map(|_| rng.below(cfg.vocab_size)).collect();
    let model = ChelaModel::new(cfg)?;
    let inputs = model.params.flat();
    let op = Model {
        template: model,
        input: ModelInput::tokens(ids, 2, 7)?,
    };
    check(&mut out, "chela_model 2-block lm".into(), &op, &inputs)?;

    for head in [TaskHead::Classification, TaskHead::Regression] {
        let cfg = ModelConfig {
            task_head: head,
            num_classes: if head == TaskHead::Classification { 3 } else { 0 },
            chunk: 4,
            ..ModelConfig::regression(2, 6, 8, 2, rng.next_u64())
        };
        let model = ChelaModel::new(cfg)?;
        let inputs = model.params.flat();
        let op = Model {
            template: model,
            input: ModelInput::Features(randn(&mut rng, &[2, 6, 2], 1.0)),
        };
        check(&mut out, format!("chela_model 2-block {head:?}"), &op, &inputs)?;
    }

    let logits = randn(&mut rng, &[6, 5], 2.0);
    let targets: Vec<usize> = (0..6).map(|_| rng.below(5)).collect();
    let op = CrossEntropy {
        targets,
        mask: vec![true, false, true, true, false, true],
    };
    check(&mut out, "cross_entropy".into(), &op, &[logits])?;
    let pred = randn(&mut rng, &[4, 1], 1.0);
    let op = Mse {
        targets: (0..4).map(|_| rng.normal(0.0, 1.0)).collect(),
    };
    check(&mut out, "mse".into(), &op, &[pred])?;

    if out.iter().any(|c| !c.error.is_finite()) {
        return Err(ChelaError::NonFinite("gradient suite"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_gradient_check() {
        let cases = gradient_suite(11).unwrap();
        assert!(cases.len() >= 30);
        for c in &cases {
            assert!(c.passed(), "{}: {:.3e}", c.name, c.error);
        }
    }

    #[test]
    fn corrupted_vjp_is_caught() {
        struct Halved(LinearAttention);
        impl DifferentiableOp for Halved {
            fn name(&self) -> &str {
                "halved"
            }
            fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
                self.0.forward(inputs)
            }
            fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Tensor>> {
                let mut g = self.0.vjp(inputs, cot)?;
                g[1].scale(0.5);
                Ok(g)
            }
        }
        let mut rng = Rng::new(2);
        let inputs = [
            randn(&mut rng, &[1, 5, 3], 1.0),
            randn(&mut rng, &[1, 5, 3], 1.0),
            randn(&mut rng, &[1, 5, 3], 1.0),
            randn(&mut rng, &[3], 1.0),
        ];
        let e = vjp_check(&Halved(LinearAttention(LinearForm::Chunked(2))), &inputs, GRAD_STEP).unwrap();
        assert!(e > 0.1);
    }
}
