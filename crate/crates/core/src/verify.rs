//! Oracle suites: three-way attention equivalence, FFT against direct
//! convolution, branch fusion, SSM convolution against the recurrence, and
//! the gradient checks.

use std::time::{Duration, Instant};

use crate::attention::{linear_attention_chunked, linear_attention_recurrent, AttentionInputs, AttnNorm};
use crate::conv::{
    causal_conv_direct, causal_conv_fft, fuse_short_branches, fused_short_forward, short_branch_forward,
    short_long_forward, short_long_forward_fused, ShortLongConvParams,
};
use crate::diffops::{gradient_suite, GRAD_TOL};
use crate::error::Result;
use crate::numerics::ops::RMS_EPS;
use crate::numerics::{Rng, Tensor};
use crate::oracle::{self, Mask};
use crate::ssm::{bilinear_discretize, hippo_s4_init, recurrent_scan, spectral_radius, ssm_forward};

pub const ATTENTION_TOL: f64 = 1e-9;
pub const CONV_TOL: f64 = 1e-10;
pub const FUSION_TOL: f64 = 1e-9;
pub const SSM_TOL: f64 = 1e-8;
/// FFT outputs before a perturbed position may move by round-off only:
/// this bound times `max(1, |y|_inf)`.
pub const FFT_CAUSALITY_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// One line per failed case.
    pub failures: Vec<String>,
    pub elapsed: Duration,
}

impl SuiteReport {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            cases: 0,
            max_error: 0.0,
            tolerance,
            failures: Vec::new(),
            elapsed: Duration::ZERO,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.cases > 0
    }

    /// Records one case whose error is compared against the suite tolerance.
    fn record(&mut self, label: impl FnOnce() -> String, error: f64) {
        self.cases += 1;
        self.max_error = self.max_error.max(error);
        if !(error <= self.tolerance) {
            self.failures.push(format!("{}: error {error:.3e}", label()));
        }
    }

    /// Records a case that is pass/fail without a numeric error.
    fn check(&mut self, label: impl FnOnce() -> String, ok: bool) {
        self.cases += 1;
        if !ok {
            self.failures.push(label());
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<24} {} cases={:<4} max_err={:.3e} tol={:.0e} time={:.1}s",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.cases,
            self.max_error,
            self.tolerance,
            self.elapsed.as_secs_f64()
        )
    }
}

fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal(0.0, 1.0)).collect()
}

fn timed(mut r: SuiteReport, start: Instant) -> SuiteReport {
    r.elapsed = start.elapsed();
    r
}

/// Chunked, recurrent and dense masked linear attention on `cases` random
/// draws, `C` cycling through `{1, 7, 64, L}`, `L <= max_len`, `d <= 64`.
pub fn attention_suite(cases: usize, max_len: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut r = SuiteReport::new("attention equivalence", ATTENTION_TOL);
    for i in 0..cases {
        let len = if i % 10 == 0 { max_len } else { 1 + rng.below(max_len) };
        let d = 1 + rng.below(64);
        let chunk = [1, 7, 64, len][i % 4];
        let q = randn(&mut rng, len * d);
        let k = randn(&mut rng, len * d);
        let v = randn(&mut rng, len * d);
        let gain: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.5, 1.5)).collect();
        let norm = AttnNorm { gain: gain.clone(), eps: RMS_EPS };
        let t = |x: &[f64]| Tensor::from_vec(&[1, len, d], x.to_vec());
        let inp = AttentionInputs::new(t(&q)?, t(&k)?, t(&v)?)?;
        let rec = linear_attention_recurrent(&inp, &norm)?;
        let chk = linear_attention_chunked(&inp, &norm, chunk)?;
        let dense = oracle::dense_linear_attention(&q, &k, &v, len, d, Mask::LowerInclusive, &gain, RMS_EPS);
        let e = oracle::rel_err(chk.data(), &dense)
            .max(oracle::rel_err(rec.data(), &dense))
            .max(oracle::rel_err(chk.data(), rec.data()));
        r.record(|| format!("L={len} d={d} C={chunk}"), e);
    }
    Ok(timed(r, start))
}

/// FFT against direct convolution for `k in {1, 3, 9, L}` at several
/// lengths up to `max_len`, plus a causality perturbation at a random
/// position of every case.
pub fn conv_suite(max_len: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut r = SuiteReport::new("conv fft/direct", CONV_TOL);
    let mut lengths: Vec<usize> = vec![1, 2, 3, 7, 64, 100, 1000, max_len];
    lengths.retain(|&l| l <= max_len);
    lengths.dedup();
    for &len in &lengths {
        for k in [1, 3, 9, len] {
            let kernel = randn(&mut rng, k);
            let x = randn(&mut rng, len);
            let direct = causal_conv_direct(&kernel, &x);
            let fft = causal_conv_fft(&kernel, &x)?;
            let exact = oracle::causal_conv(&kernel, &x);
            let e = oracle::rel_err(&fft, &exact).max(oracle::rel_err(&direct, &exact));
            r.record(|| format!("L={len} k={k}"), e);

            let t = rng.below(len);
            let mut xp = x.clone();
            xp[t] += 1.0 + rng.uniform();
            let direct_p = causal_conv_direct(&kernel, &xp);
            let fft_p = causal_conv_fft(&kernel, &xp)?;
            let direct_ok = direct_p[..t] == direct[..t];
            let bound = FFT_CAUSALITY_TOL * fft.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let fft_ok = fft_p[..t].iter().zip(&fft[..t]).all(|(a, b)| (a - b).abs() <= bound);
            r.check(|| format!("causality L={len} k={k} t={t}: direct {direct_ok}, fft {fft_ok}"), direct_ok && fft_ok);
        }
    }
    Ok(timed(r, start))
}

/// Multi-branch training path against the single fused kernel on `draws`
/// random parameter sets and inputs.
pub fn fusion_suite(draws: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut r = SuiteReport::new("short-branch fusion", FUSION_TOL);
    for i in 0..draws {
        let c = 1 + rng.below(8);
        let max_len = 1 + rng.below(512);
        let len = 1 + rng.below(max_len);
        let b = 1 + rng.below(3);
        let identity = i % 2 == 0;
        let p = ShortLongConvParams::init(c, max_len, identity, &mut rng);
        let x = Tensor::from_vec(&[b, len, c], randn(&mut rng, b * len * c))?;
        let fused = fuse_short_branches(&p.bank)?;
        let e_short = oracle::rel_err_tensor(&fused_short_forward(&fused, &x)?, &short_branch_forward(&p.bank, &x)?);
        let e_full = oracle::rel_err_tensor(
            &short_long_forward_fused(&fused, &p.long_kernel, &x)?,
            &short_long_forward(&p, &x)?,
        );
        r.record(|| format!("C={c} L={len} B={b} identity={identity}"), e_short.max(e_full));
    }
    Ok(timed(r, start))
}

/// Convolutional SSM forward against the recurrent scan for HiPPO systems
/// with `d_s <= 32`, `L <= max_len`, and the spectral radius of the
/// discretized transition below one for step sizes up to 0.1.
pub fn ssm_suite(max_len: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut r = SuiteReport::new("ssm conv/recurrence", SSM_TOL);
    let mut lengths = vec![1, 17, 256, max_len];
    lengths.retain(|&l| l <= max_len);
    for n in [1, 2, 4, 8, 16, 32] {
        for &len in &lengths {
            let delta = rng.uniform_range(1e-3, 0.1);
            let disc = bilinear_discretize(&hippo_s4_init(n, delta, &mut rng)?)?;
            let u = randn(&mut rng, len);
            let e = oracle::rel_err(&ssm_forward(&disc, &u)?, &recurrent_scan(&disc, &u));
            r.record(|| format!("d_s={n} L={len} delta={delta:.4}"), e);
        }
        for delta in [1e-4, 1e-3, 1e-2, 0.05, 0.1] {
            let disc = bilinear_discretize(&hippo_s4_init(n, delta, &mut rng)?)?;
            let rho = spectral_radius(&disc);
            r.check(|| format!("spectral radius d_s={n} delta={delta}: {rho}"), rho < 1.0);
        }
    }
    Ok(timed(r, start))
}

/// Every differentiable op through central finite differences.
pub fn grad_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut r = SuiteReport::new("gradient checks", GRAD_TOL);
    for c in gradient_suite(seed)? {
        r.record(|| c.name.clone(), c.error);
    }
    Ok(timed(r, start))
}

/// Sizes of the full oracle run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyScale {
    pub attention_cases: usize,
    pub attention_max_len: usize,
    pub conv_max_len: usize,
    pub fusion_draws: usize,
    pub ssm_max_len: usize,
}

impl VerifyScale {
    pub const FULL: VerifyScale = VerifyScale {
        attention_cases: 200,
        attention_max_len: 1024,
        conv_max_len: 4096,
        fusion_draws: 100,
        ssm_max_len: 1024,
    };

    pub const QUICK: VerifyScale = VerifyScale {
        attention_cases: 24,
        attention_max_len: 96,
        conv_max_len: 256,
        fusion_draws: 10,
        ssm_max_len: 128,
    };
}

pub fn run_all(scale: VerifyScale, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        attention_suite(scale.attention_cases, scale.attention_max_len, seed)?,
        conv_suite(scale.conv_max_len, seed.wrapping_add(1))?,
        fusion_suite(scale.fusion_draws, seed.wrapping_add(2))?,
        ssm_suite(scale.ssm_max_len, seed.wrapping_add(3))?,
        grad_suite(seed.wrapping_add(4))?,
    ])
}
