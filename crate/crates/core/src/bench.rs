//! Runtime benchmarks of the raw sequence ops in `f32`, scaling-exponent
//! fits and the CSV format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    linear_core_backward, linear_core_forward, linear_state_bytes, softmax_core_backward, softmax_core_forward,
    softmax_state_bytes, LinearForm, DEFAULT_CHUNK,
};
use crate::conv::{
    causal_conv_direct, causal_conv_vjp, depthwise_fft, depthwise_fft_backward, short_kernel_size,
    short_long_backward, short_long_forward_cached, FftConv, ShortConvBank, ShortLongConvParams,
};
use crate::error::{ChelaError, Result};
use crate::numerics::{Rng, Scalar, Tensor};

/// Largest `L * L` the softmax benchmark accepts by default (`L = 2^14`).
pub const DEFAULT_SOFTMAX_BUDGET: usize = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchOp {
    Softmax,
    LinearNoncausal,
    LinearRecurrent,
    LinearChunked,
    Fftconv,
    Directconv,
    Shortlong,
}

impl BenchOp {
    pub const ALL: [BenchOp; 7] = [
        BenchOp::Softmax,
        BenchOp::LinearNoncausal,
        BenchOp::LinearRecurrent,
        BenchOp::LinearChunked,
        BenchOp::Fftconv,
        BenchOp::Directconv,
        BenchOp::Shortlong,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchOp::Softmax => "softmax",
            BenchOp::LinearNoncausal => "linear_noncausal",
            BenchOp::LinearRecurrent => "linear_recurrent",
            BenchOp::LinearChunked => "linear_chunked",
            BenchOp::Fftconv => "fftconv",
            BenchOp::Directconv => "directconv",
            BenchOp::Shortlong => "shortlong",
        }
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchOp {
    type Err = String;

    /// Accepts the canonical names plus `noncausal`, `recurrent` and `chunked`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let op = match s {
            "noncausal" => BenchOp::LinearNoncausal,
            "recurrent" => BenchOp::LinearRecurrent,
            "chunked" => BenchOp::LinearChunked,
            _ => *BenchOp::ALL
                .iter()
                .find(|o| o.as_str() == s)
                .ok_or_else(|| format!("unknown op `{s}`"))?,
        };
        Ok(op)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub ops: Vec<BenchOp>,
    pub lengths: Vec<usize>,
    pub dim: usize,
    pub chunk: usize,
    /// Timed repeats per measurement; one extra warm-up run is discarded.
    pub repeats: usize,
    /// Maximum `L * L` for the softmax op.
    pub softmax_budget: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            ops: BenchOp::ALL.to_vec(),
            lengths: vec![1024, 2048, 4096],
            dim: 64,
            chunk: DEFAULT_CHUNK,
            repeats: 5,
            softmax_budget: DEFAULT_SOFTMAX_BUDGET,
            seed: 0,
        }
    }
}

/// One `(op, L)` measurement. Times are medians in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub op: BenchOp,
    pub length: usize,
    pub dim: usize,
    pub chunk: usize,
    pub repeats: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub state_bytes: usize,
}

/// The CSV columns of a [`BenchRow`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub op: BenchOp,
    pub length: usize,
    pub dim: usize,
    pub chunk: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub state_bytes: usize,
}

pub const CSV_HEADER: [&str; 7] = ["op", "length", "dim", "chunk", "forward_ms", "backward_ms", "state_bytes"];

impl BenchRow {
    pub fn record(&self) -> BenchRecord {
        BenchRecord {
            op: self.op,
            length: self.length,
            dim: self.dim,
            chunk: self.chunk,
            forward_ms: self.forward_ms,
            backward_ms: self.backward_ms,
            state_bytes: self.state_bytes,
        }
    }

    pub fn total_ms(&self) -> f64 {
        self.forward_ms + self.backward_ms
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time of `repeats` calls after one discarded warm-up call.
fn time_ms(repeats: usize, mut f: impl FnMut()) -> f64 {
    f();
    let samples = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    // Timer resolution floor keeps the reported value positive.
    median(samples).max(1e-6)
}

fn rand_f32(rng: &mut Rng, n: usize, std: f64) -> Vec<f32> {
    (0..n).map(|_| rng.normal(0.0, std) as f32).collect()
}

fn sink<T: Scalar>(v: &[T]) {
    std::hint::black_box(v);
}

fn measure(op: BenchOp, l: usize, spec: &BenchSpec, rng: &mut Rng) -> Result<BenchRow> {
    let d = spec.dim;
    let r = spec.repeats;
    let std = 1.0 / (d as f64).sqrt();
    let (forward_ms, backward_ms, state_bytes) = match op {
        BenchOp::Softmax => {
            let (q, k, v, g) = (
                rand_f32(rng, l * d, 1.0),
                rand_f32(rng, l * d, 1.0),
                rand_f32(rng, l * d, 1.0),
                rand_f32(rng, l * d, 1.0),
            );
            let mut out = vec![0f32; l * d];
            let mut lse = vec![0f32; l];
            let f = time_ms(r, || {
                softmax_core_forward(&q, &k, &v, l, d, true, &mut out, &mut lse);
                sink(&out);
            });
            let (mut dq, mut dk, mut dv) = (vec![0f32; l * d], vec![0f32; l * d], vec![0f32; l * d]);
            let b = time_ms(r, || {
                softmax_core_backward(&q, &k, &v, &out, &lse, &g, l, d, true, &mut dq, &mut dk, &mut dv);
                sink(&dq);
            });
            (f, b, softmax_state_bytes::<f32>(l))
        }
        BenchOp::LinearNoncausal | BenchOp::LinearRecurrent | BenchOp::LinearChunked => {
            let form = match op {
                BenchOp::LinearNoncausal => LinearForm::Noncausal,
                BenchOp::LinearRecurrent => LinearForm::Recurrent,
                _ => LinearForm::Chunked(spec.chunk),
            };
            let (q, k, v, g) = (
                rand_f32(rng, l * d, std),
                rand_f32(rng, l * d, std),
                rand_f32(rng, l * d, 1.0),
                rand_f32(rng, l * d, 1.0),
            );
            let f = time_ms(r, || sink(&linear_core_forward(form, &q, &k, &v, l, d)));
            let b = time_ms(r, || sink(&linear_core_backward(form, &q, &k, &v, &g, l, d).0));
            (f, b, linear_state_bytes::<f32>(form, d, d))
        }
        BenchOp::Fftconv => {
            let kernels = Tensor::from_vec(&[d, l], rand_f32(rng, d * l, 1.0 / l as f64))?;
            let (x, g) = (rand_f32(rng, d * l, 1.0), rand_f32(rng, d * l, 1.0));
            let f = time_ms(r, || sink(&depthwise_fft(&kernels, &x, 1, l).expect("valid shapes")));
            let b = time_ms(r, || {
                sink(&depthwise_fft_backward(&kernels, &x, &g, 1, l).expect("valid shapes").0)
            });
            let n = FftConv::<f32>::new(l, l)?.padded_len();
            // kernel spectrum + signal spectrum, complex f32
            (f, b, 2 * n * 2 * f32::BYTES)
        }
        BenchOp::Directconv => {
            let kernels = rand_f32(rng, d * l, 1.0 / l as f64);
            let (x, g) = (rand_f32(rng, d * l, 1.0), rand_f32(rng, d * l, 1.0));
            let f = time_ms(r, || {
                for ch in 0..d {
                    sink(&causal_conv_direct(&kernels[ch * l..(ch + 1) * l], &x[ch * l..(ch + 1) * l]));
                }
            });
            let b = time_ms(r, || {
                for ch in 0..d {
                    let s = ch * l..(ch + 1) * l;
                    sink(&causal_conv_vjp(&kernels[s.clone()], &x[s.clone()], &g[s]).0);
                }
            });
            (f, b, 0)
        }
        BenchOp::Shortlong => {
            let kv = short_kernel_size(l);
            let p = ShortLongConvParams::<f32> {
                bank: ShortConvBank {
                    k3: Tensor::from_vec(&[d, 3], rand_f32(rng, d * 3, 0.3))?,
                    kvar: Tensor::from_vec(&[d, kv], rand_f32(rng, d * kv, 0.3))?,
                    include_identity: true,
                },
                long_kernel: Tensor::from_vec(&[d, l], rand_f32(rng, d * l, 1.0 / l as f64))?,
            };
            let x = Tensor::from_vec(&[1, l, d], rand_f32(rng, l * d, 1.0))?;
            let g = Tensor::from_vec(&[1, l, d], rand_f32(rng, l * d, 1.0))?;
            let (_, cache) = short_long_forward_cached(&p, &x)?;
            let f = time_ms(r, || sink(short_long_forward_cached(&p, &x).expect("valid shapes").0.data()));
            let b = time_ms(r, || {
                sink(short_long_backward(&p, &x, &cache, &g).expect("valid shapes").0.data())
            });
            // cached pre-activation, channel-major f32
            (f, b, l * d * f32::BYTES)
        }
    };
    Ok(BenchRow {
        op,
        length: l,
        dim: d,
        chunk: if op == BenchOp::LinearChunked { spec.chunk } else { 0 },
        repeats: r,
        forward_ms,
        backward_ms,
        state_bytes,
    })
}

fn validate(spec: &BenchSpec) -> Result<()> {
    if spec.ops.is_empty() || spec.lengths.is_empty() {
        return Err(ChelaError::InvalidArgument("at least one op and one length are required".into()));
    }
    if spec.repeats < 3 {
        return Err(ChelaError::InvalidArgument(format!("repeats must be >= 3, got {}", spec.repeats)));
    }
    if spec.dim == 0 || spec.chunk == 0 || spec.lengths.contains(&0) {
        return Err(ChelaError::InvalidArgument("dim, chunk and lengths must be positive".into()));
    }
    if spec.ops.contains(&BenchOp::Softmax) {
        if let Some(&l) = spec.lengths.iter().find(|&&l| l.saturating_mul(l) > spec.softmax_budget) {
            return Err(ChelaError::BudgetExceeded(format!(
                "softmax at L={l} needs L*L = {} score entries, budget is {}; drop softmax or raise the budget",
                l.saturating_mul(l),
                spec.softmax_budget
            )));
        }
    }
    Ok(())
}

/// One row per `(op, L)` in the order requested. Input generation is not
/// timed. Runs on the calling thread's rayon pool.
pub fn bench_run(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    validate(spec)?;
    let mut rng = Rng::new(spec.seed);
    let mut rows = Vec::with_capacity(spec.ops.len() * spec.lengths.len());
    for &op in &spec.ops {
        for &l in &spec.lengths {
            rows.push(measure(op, l, spec, &mut rng)?);
        }
    }
    Ok(rows)
}

/// Runs `f` inside a dedicated rayon pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| ChelaError::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<f64> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(ChelaError::InvalidArgument(format!(
            "scaling fit needs at least 3 distinct lengths, got {}",
            xs.len()
        )));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(ChelaError::InvalidArgument("scaling fit needs positive lengths and times".into()));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Scaling exponent of the forward plus backward median time over the rows
/// of one op.
pub fn fit_scaling_exponent(rows: &[BenchRow]) -> Result<f64> {
    if let Some(r) = rows.first() {
        if rows.iter().any(|x| x.op != r.op) {
            return Err(ChelaError::InvalidArgument("scaling fit rows must share one op".into()));
        }
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.length as f64, r.total_ms())).collect();
    fit_power_law(&pts)
}

pub fn write_csv<W: std::io::Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(CSV_HEADER)?;
    for r in rows {
        wr.serialize(r.record())?;
    }
    wr.flush().map_err(|e| ChelaError::io("<csv>", e))?;
    Ok(())
}

pub fn emit_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| ChelaError::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(f))
}

pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<BenchRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(ChelaError::InvalidArgument(format!("unexpected CSV header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(ChelaError::from)).collect()
}

pub fn parse_csv(path: &Path) -> Result<Vec<BenchRecord>> {
    let f = std::fs::File::open(path).map_err(|e| ChelaError::io(path, e))?;
    read_csv(f)
}
