//! Command line: `bench`, `train`, `eval` and `verify`.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed checks), 2
//! usage error. Worker threads come from `--threads`, else `CHELA_THREADS`,
//! else 1.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, BenchOp, BenchSpec, DEFAULT_SOFTMAX_BUDGET};
use crate::error::{ChelaError, Result};
use crate::layer::{ChelaModel, ModelConfig};
use crate::train::{self, load_checkpoint, AdamWHyper, TaskKind, TrainConfig};
use crate::verify::{self, VerifyScale};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const THREADS_ENV: &str = "CHELA_THREADS";

#[derive(Debug, Parser, PartialEq)]
#[command(name = "chela", version, about = "Chunked linear attention with short-long convolutions")]
pub struct Cli {
    /// Worker threads (overrides CHELA_THREADS; default 1)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, PartialEq)]
pub enum Command {
    /// Time forward and backward passes across sequence lengths
    Bench(BenchArgs),
    /// Train a model on a synthetic task or a byte corpus
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out data
    Eval(EvalArgs),
    /// Run the oracle suites; exits 1 on any failure
    Verify(VerifyArgs),
}

#[derive(Debug, Args, PartialEq)]
pub struct BenchArgs {
    /// Ops to time (comma separated): softmax, linear_noncausal|noncausal,
    /// linear_recurrent|recurrent, linear_chunked|chunked, fftconv,
    /// directconv, shortlong
    #[arg(long = "op", value_delimiter = ',', required = true)]
    pub ops: Vec<BenchOp>,
    /// Sequence lengths (comma separated)
    #[arg(long, value_delimiter = ',', required = true)]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = crate::attention::DEFAULT_CHUNK)]
    pub chunk: usize,
    /// Timed repeats (median); one extra warm-up run is discarded
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Refuse softmax above this L*L
    #[arg(long, default_value_t = DEFAULT_SOFTMAX_BUDGET)]
    pub softmax_budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output (header op,length,dim,chunk,forward_ms,backward_ms,state_bytes)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, PartialEq)]
pub struct TrainArgs {
    /// copy, recall, adding or bytes
    #[arg(long)]
    pub task: TaskKind,
    /// Model configuration JSON (ModelConfig field names; unknown keys rejected)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds both the model initialization and the data stream (default: the
    /// config's seed)
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 4)]
    pub eval_batches: usize,
    /// Stop at the first evaluation reaching this accuracy
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    /// Corpus file for the bytes task
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Metrics CSV (step,loss,accuracy,grad_norm,wall_ms)
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Checkpoint written every --checkpoint-every steps and at the end
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from this checkpoint (config, weights, optimizer, data stream)
    #[arg(long, conflicts_with_all = ["config", "seed"])]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, PartialEq)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 8)]
    pub batches: usize,
    /// Seed of the held-out set (default: the model's seed, matching training)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, PartialEq)]
pub struct VerifyArgs {
    /// Small sizes for a fast smoke run
    #[arg(long)]
    pub quick: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn parse<I, T>(argv: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

fn thread_count(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n.max(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| n.max(1))
            .map_err(|_| ChelaError::InvalidArgument(format!("{THREADS_ENV}={v} is not a positive integer"))),
        Err(_) => Ok(1),
    }
}

fn io_err(e: std::io::Error) -> ChelaError {
    ChelaError::io("<stdout>", e)
}

fn run_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<bool> {
    let spec = BenchSpec {
        ops: a.ops.clone(),
        lengths: a.lengths.clone(),
        dim: a.dim,
        chunk: a.chunk,
        repeats: a.repeats,
        softmax_budget: a.softmax_budget,
        seed: a.seed,
    };
    let rows = bench::bench_run(&spec)?;
    match &a.out {
        Some(p) => bench::emit_csv(&rows, p)?,
        None => bench::write_csv(&rows, &mut *out)?,
    }
    let mut ops = a.ops.clone();
    ops.sort();
    ops.dedup();
    for op in ops {
        let sel: Vec<_> = rows.iter().filter(|r| r.op == op).cloned().collect();
        if let Ok(slope) = bench::fit_scaling_exponent(&sel) {
            writeln!(out, "# {op}: scaling exponent {slope:.3}").map_err(io_err)?;
        }
    }
    Ok(true)
}

fn run_train(a: &TrainArgs, out: &mut dyn Write) -> Result<bool> {
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        hyper: AdamWHyper {
            lr: a.lr,
            weight_decay: a.weight_decay,
            ..Default::default()
        },
        warmup: a.warmup,
        clip: a.clip,
        eval_every: a.eval_every,
        eval_batches: a.eval_batches,
        data_seed: 0,
        target_accuracy: a.target_accuracy,
        checkpoint_every: a.checkpoint_every,
        checkpoint_path: a.checkpoint.clone(),
        metrics_path: a.metrics.clone(),
    };
    let outcome = if let Some(path) = &a.resume {
        let ck = load_checkpoint(path)?;
        let task = a.task.task(&ck.model.config, a.data.as_deref(), a.batch, ck.model.config.seed)?;
        let data_seed = ck.model.config.seed;
        train::resume(ck, &task, &TrainConfig { data_seed, ..cfg })?
    } else {
        let mut model_cfg = match &a.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ChelaError::io(p, e))?;
                ModelConfig::from_json(&text)?
            }
            None => a.task.default_config(0),
        };
        if let Some(s) = a.seed {
            model_cfg.seed = s;
        }
        let cfg = TrainConfig { data_seed: model_cfg.seed, ..cfg };
        let task = a.task.task(&model_cfg, a.data.as_deref(), a.batch, cfg.data_seed)?;
        let model = ChelaModel::new(model_cfg)?;
        writeln!(out, "# {} parameters", model.param_count()).map_err(io_err)?;
        train::train_loop(model, &task, &cfg)?
    };
    writeln!(out, "step,loss,accuracy,grad_norm,wall_ms").map_err(io_err)?;
    for r in &outcome.trace {
        writeln!(out, "{},{},{},{},{}", r.step, r.loss, r.accuracy, r.grad_norm, r.wall_ms).map_err(io_err)?;
    }
    Ok(true)
}

fn run_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<bool> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let seed = a.seed.unwrap_or(ck.model.config.seed);
    let task = a.task.task(&ck.model.config, a.data.as_deref(), a.batch, seed)?;
    let eval = task.eval_set(&crate::Rng::new(seed), a.batches, a.batch)?;
    let (loss, accuracy) = train::evaluate(&ck.model, &eval)?;
    writeln!(out, "loss={loss} accuracy={accuracy} step={}", ck.step).map_err(io_err)?;
    if a.task == TaskKind::Bytes {
        writeln!(out, "bits_per_byte={}", loss / std::f64::consts::LN_2).map_err(io_err)?;
    }
    Ok(true)
}

fn run_verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<bool> {
    let scale = if a.quick { VerifyScale::QUICK } else { VerifyScale::FULL };
    let reports = verify::run_all(scale, a.seed)?;
    let mut ok = true;
    for r in &reports {
        writeln!(out, "{}", r.summary()).map_err(io_err)?;
        for f in &r.failures {
            writeln!(out, "  {f}").map_err(io_err)?;
        }
        ok &= r.passed();
    }
    Ok(ok)
}

/// Executes a parsed command. `Ok(false)` means the command ran but a check
/// failed.
pub fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<bool> {
    let threads = thread_count(cli.threads)?;
    bench::with_threads(threads, || match &cli.command {
        Command::Bench(a) => run_bench(a, out),
        Command::Train(a) => run_train(a, out),
        Command::Eval(a) => run_eval(a, out),
        Command::Verify(a) => run_verify(a, out),
    })?
}

/// Parses, runs and maps the outcome to an exit code.
pub fn main_with<I, T>(argv: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_grammar() {
        let cli = parse([
            "chela", "bench", "--op", "chunked", "--lengths", "1024,2048", "--dim", "64", "--chunk", "64", "--repeats",
            "5", "--out", "b.csv",
        ])
        .unwrap();
        let Command::Bench(b) = cli.command else { panic!("not bench") };
        assert_eq!(b.ops, vec![BenchOp::LinearChunked]);
        assert_eq!(b.lengths, vec![1024, 2048]);
        assert_eq!((b.dim, b.chunk, b.repeats), (64, 64, 5));
        assert_eq!(b.out, Some(PathBuf::from("b.csv")));
    }

    #[test]
    fn train_grammar() {
        let cli = parse(["chela", "train", "--task", "copy", "--config", "cfg.json", "--seed", "42"]).unwrap();
        let Command::Train(t) = cli.command else { panic!("not train") };
        assert_eq!(t.task, TaskKind::Copy);
        assert_eq!(t.config, Some(PathBuf::from("cfg.json")));
        assert_eq!(t.seed, Some(42));
    }

    #[test]
    fn rejections_exit_with_usage() {
        for argv in [
            vec!["chela", "bench", "--op", "chunked", "--lengths", "10,abc"],
            vec!["chela", "bench", "--op", "quadratic", "--lengths", "10"],
            vec!["chela", "frobnicate"],
            vec!["chela", "verify", "--bogus"],
            vec!["chela", "train", "--task", "copy", "--resume", "a", "--seed", "1"],
        ] {
            let (mut o, mut e) = (Vec::new(), Vec::new());
            assert_eq!(main_with(argv.clone(), &mut o, &mut e), EXIT_USAGE, "{argv:?}");
            assert!(!e.is_empty());
        }
    }

    #[test]
    fn help_exits_zero() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(main_with(["chela", "--help"], &mut o, &mut e), EXIT_OK);
        let text = String::from_utf8(o).unwrap();
        assert!(text.contains("bench") && text.contains("verify"));
    }

    #[test]
    fn runtime_failure_exits_one() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let argv = ["chela", "eval", "--checkpoint", "/nonexistent/ck.bin", "--task", "copy"];
        assert_eq!(main_with(argv, &mut o, &mut e), EXIT_FAILURE);
        assert!(String::from_utf8(e).unwrap().contains("error"));
    }
}
