//! Property tests of the stated invariants over random shapes and values.

use chela::attention::{
    linear_attention_chunked, linear_attention_recurrent, linear_state_bytes, softmax_attention, AttentionInputs,
    AttnNorm, LinearForm,
};
use chela::conv::{
    causal_conv_direct, causal_conv_fft, depthwise_fft, fuse_short_branches, fused_short_forward,
    short_branch_forward, short_long_forward, short_long_forward_fused, ShortLongConvParams,
};
use chela::layer::{ChelaModel, MixerKind, ModelConfig, ModelInput, Params, TaskHead};
use chela::numerics::fft;
use chela::oracle::{self, Mask};
use chela::ssm::{bilinear_discretize, hippo_s4_init, materialize_kernel, recurrent_scan, ssm_forward};
use chela::train::checkpoint::{decode_checkpoint, encode_checkpoint};
use chela::train::{adamw_step, cross_entropy, AdamWHyper, Checkpoint, OptimState};
use chela::{Rng, Tensor};
use num_complex::Complex64;
use proptest::prelude::*;

fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal(0.0, 1.0)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parseval(n in 1usize..=4096, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.normal(0.0, 1.0), rng.normal(0.0, 1.0))).collect();
        let y = fft(&x, false).unwrap();
        let ex: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let ey: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        let padded = n.next_power_of_two() as f64;
        prop_assert!((ey - padded * ex).abs() <= 1e-10 * padded * ex);
    }

    #[test]
    fn fft_conv_matches_direct_and_oracle(len in 1usize..=600, k in 1usize..=80, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let kernel = randn(&mut rng, k);
        let x = randn(&mut rng, len);
        let exact = oracle::causal_conv(&kernel, &x);
        prop_assert!(oracle::rel_err(&causal_conv_fft(&kernel, &x).unwrap(), &exact) <= 1e-10);
        prop_assert!(oracle::rel_err(&causal_conv_direct(&kernel, &x), &exact) <= 1e-10);
    }

    #[test]
    fn convolutions_are_causal(len in 2usize..=300, k in 1usize..=40, t_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let kernel = randn(&mut rng, k);
        let x = randn(&mut rng, len);
        let t = ((len as f64 * t_frac) as usize).min(len - 1);
        let mut xp = x.clone();
        xp[t] += 3.0;
        prop_assert_eq!(&causal_conv_direct(&kernel, &xp)[..t], &causal_conv_direct(&kernel, &x)[..t]);
        let (a, b) = (causal_conv_fft(&kernel, &x).unwrap(), causal_conv_fft(&kernel, &xp).unwrap());
        let bound = 1e-12 * a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(a[..t].iter().zip(&b[..t]).all(|(u, v)| (u - v).abs() <= bound));
    }

    #[test]
    fn depthwise_rows_are_independent(b in 1usize..=4, c in 1usize..=3, len in 1usize..=64, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let kernels = tensor(&[c, len], randn(&mut rng, c * len));
        let x = randn(&mut rng, b * c * len);
        let y = depthwise_fft(&kernels, &x, b, len).unwrap();
        for row in 0..b * c {
            let ch = row % c;
            let want = causal_conv_direct(&kernels.data()[ch * len..(ch + 1) * len], &x[row * len..(row + 1) * len]);
            prop_assert!(oracle::rel_err(&y[row * len..(row + 1) * len], &want) <= 1e-10);
        }
    }

    #[test]
    fn linear_attention_forms_agree(len in 1usize..=160, d in 1usize..=24, chunk in 1usize..=170, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (q, k, v) = (randn(&mut rng, len * d), randn(&mut rng, len * d), randn(&mut rng, len * d));
        let gain: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.5, 1.5)).collect();
        let norm = AttnNorm { gain: gain.clone(), eps: 1e-6 };
        let t = |x: &[f64]| tensor(&[1, len, d], x.to_vec());
        let inp = AttentionInputs::new(t(&q), t(&k), t(&v)).unwrap();
        let rec = linear_attention_recurrent(&inp, &norm).unwrap();
        let chk = linear_attention_chunked(&inp, &norm, chunk).unwrap();
        let dense = oracle::dense_linear_attention(&q, &k, &v, len, d, Mask::LowerInclusive, &gain, 1e-6);
        prop_assert!(oracle::rel_err(chk.data(), &dense) <= 1e-9);
        prop_assert!(oracle::rel_err(rec.data(), &dense) <= 1e-9);
    }

    #[test]
    fn chunk_state_is_independent_of_length(chunk in 1usize..=128, d in 1usize..=64) {
        let bytes = linear_state_bytes::<f32>(LinearForm::Chunked(chunk), d, d);
        prop_assert!(bytes >= 4 * d * d);
        prop_assert_eq!(bytes, linear_state_bytes::<f32>(LinearForm::Chunked(chunk), d, d));
    }

    #[test]
    fn softmax_rows_sum_to_one(len in 1usize..=96, d in 1usize..=16, causal in any::<bool>(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let q = tensor(&[1, len, d], randn(&mut rng, len * d));
        let k = tensor(&[1, len, d], randn(&mut rng, len * d));
        let ones = tensor(&[1, len, d], vec![1.0; len * d]);
        let y = softmax_attention(&AttentionInputs::new(q, k, ones).unwrap(), causal).unwrap();
        prop_assert!(y.data().iter().all(|v| (v - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn fusion_is_exact(c in 1usize..=6, max_len in 1usize..=400, len_frac in 0.0f64..1.0, b in 1usize..=3, identity in any::<bool>(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let len = 1 + ((max_len - 1) as f64 * len_frac) as usize;
        let p = ShortLongConvParams::init(c, max_len, identity, &mut rng);
        let x = tensor(&[b, len, c], randn(&mut rng, b * len * c));
        let fused = fuse_short_branches(&p.bank).unwrap();
        let short = short_branch_forward(&p.bank, &x).unwrap();
        prop_assert!(oracle::rel_err_tensor(&fused_short_forward(&fused, &x).unwrap(), &short) <= 1e-9);
        let full = short_long_forward(&p, &x).unwrap();
        prop_assert!(oracle::rel_err_tensor(&short_long_forward_fused(&fused, &p.long_kernel, &x).unwrap(), &full) <= 1e-9);
    }

    #[test]
    fn ssm_convolution_matches_scan(n in 1usize..=32, len in 1usize..=300, delta in 1e-3f64..0.1, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let disc = bilinear_discretize(&hippo_s4_init(n, delta, &mut rng).unwrap()).unwrap();
        let u = randn(&mut rng, len);
        prop_assert!(oracle::rel_err(&ssm_forward(&disc, &u).unwrap(), &recurrent_scan(&disc, &u)) <= 1e-8);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows(rows in 1usize..=12, vocab in 2usize..=9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let logits = randn(&mut rng, rows * vocab);
        let targets: Vec<usize> = (0..rows).map(|_| rng.below(vocab)).collect();
        let mut mask: Vec<bool> = (0..rows).map(|_| rng.uniform() < 0.6).collect();
        mask[0] = true;
        let a = cross_entropy(&tensor(&[rows, vocab], logits.clone()), &targets, &mask).unwrap();
        let mut changed = logits.clone();
        for r in (0..rows).filter(|&r| !mask[r]) {
            for v in &mut changed[r * vocab..(r + 1) * vocab] {
                *v += rng.normal(0.0, 5.0);
            }
        }
        let b = cross_entropy(&tensor(&[rows, vocab], changed), &targets, &mask).unwrap();
        prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        prop_assert_eq!(a.counted, mask.iter().filter(|&&m| m).count());
        for r in (0..rows).filter(|&r| !mask[r]) {
            prop_assert!(a.grad.data()[r * vocab..(r + 1) * vocab].iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn adamw_keeps_moment_shapes(seed in any::<u64>(), steps in 1usize..=4) {
        let mut rng = Rng::new(seed);
        let mut params = vec![tensor(&[3, 4], randn(&mut rng, 12)), tensor(&[4], randn(&mut rng, 4))];
        let mut state = OptimState::new(params.iter());
        for s in 0..steps {
            let grads = [tensor(&[3, 4], randn(&mut rng, 12)), tensor(&[4], randn(&mut rng, 4))];
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            adamw_step(&mut refs, &grads.iter().collect::<Vec<_>>(), &[true, false], &mut state, &AdamWHyper::default(), 1e-3).unwrap();
            prop_assert_eq!(state.step, s as u64 + 1);
        }
        for (i, p) in params.iter().enumerate() {
            prop_assert_eq!(state.m[i].shape(), p.shape());
            prop_assert_eq!(state.v[i].shape(), p.shape());
            prop_assert!(state.v[i].data().iter().all(|&v| v >= 0.0));
        }
    }
}

fn small_config(mixer: MixerKind, head: TaskHead, seed: u64) -> ModelConfig {
    let base = ModelConfig::lm(2, 8, 12, 5, seed);
    match head {
        TaskHead::Lm => ModelConfig { mixer, chunk: 4, ..base },
        TaskHead::Classification => ModelConfig {
            mixer,
            task_head: head,
            num_classes: 3,
            ..base
        },
        TaskHead::Regression => ModelConfig {
            mixer,
            ..ModelConfig::regression(2, 8, 12, 2, seed)
        },
    }
}

fn mixer_of(i: usize) -> MixerKind {
    [MixerKind::ShortLong, MixerKind::LongConv, MixerKind::Ssm][i % 3]
}

fn head_of(i: usize) -> TaskHead {
    [TaskHead::Lm, TaskHead::Classification, TaskHead::Regression][i % 3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip_is_exact(m in 0usize..3, h in 0usize..3, seed in any::<u64>(), step in any::<u32>(), rng_state in any::<u64>()) {
        let model = ChelaModel::new(small_config(mixer_of(m), head_of(h), seed)).unwrap();
        let mut optim = OptimState::new(model.params.named().into_iter().map(|(_, t)| t));
        let mut rng = Rng::new(seed);
        for t in optim.m.iter_mut().chain(optim.v.iter_mut()) {
            for v in t.data_mut() {
                *v = rng.normal(0.0, 1.0) as f32 as f64;
            }
        }
        optim.step = step as u64;
        let ck = Checkpoint { model, optim: Some(optim), rng_state, step: step as u64 };
        let bytes = encode_checkpoint(&ck).unwrap();
        prop_assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
    }

    #[test]
    fn model_forward_is_pure_and_lm_is_causal(m in 0usize..3, seed in any::<u64>(), t in 0usize..12) {
        let model = ChelaModel::new(small_config(mixer_of(m), TaskHead::Lm, seed)).unwrap();
        let mut rng = Rng::new(seed ^ 1);
        let ids: Vec<usize> = (0..24).map(|_| rng.below(5)).collect();
        let input = ModelInput::tokens(ids.clone(), 2, 12).unwrap();
        let a = model.forward(&input).unwrap();
        let again = model.forward(&input).unwrap();
        prop_assert!(a.data().iter().zip(again.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mut changed = ids;
        changed[t] = (changed[t] + 1) % 5;
        let b = model.forward(&ModelInput::tokens(changed, 2, 12).unwrap()).unwrap();
        let bound = 1e-12 * a.max_abs().max(1.0);
        let prefix = t * 5;
        prop_assert!(a.data()[..prefix].iter().zip(&b.data()[..prefix]).all(|(x, y)| (x - y).abs() <= bound));
        // Rows share packed FFTs, so the other row may move by round-off only.
        prop_assert!(a.data()[12 * 5..].iter().zip(&b.data()[12 * 5..]).all(|(x, y)| (x - y).abs() <= bound));
    }
}

/// Linear regression of `y` on `x`: `(slope, r_squared)`.
fn fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, (sxy * sxy) / (sxx * syy))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The kernel envelope decays geometrically: the log of the windowed
    /// maximum of `|k_t|` over the tail is linear in `t` with negative slope.
    #[test]
    fn hippo_kernel_decays_geometrically(n in 2usize..=32, delta in 0.02f64..=0.1, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let disc = bilinear_discretize(&hippo_s4_init(n, delta, &mut rng).unwrap()).unwrap();
        let k = materialize_kernel(&disc, 2048);
        let window = 32;
        let (mut ts, mut logs) = (Vec::new(), Vec::new());
        for (w, chunk) in k.chunks(window).enumerate().skip(4) {
            let peak = chunk.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 1e-280 {
                ts.push((w * window) as f64);
                logs.push(peak.ln());
            }
        }
        prop_assume!(ts.len() >= 8);
        let (slope, r2) = fit(&ts, &logs);
        prop_assert!(slope < 0.0, "rho = {}", slope.exp());
        prop_assert!(r2 >= 0.9, "r2 = {r2}, slope {slope}");
    }
}
