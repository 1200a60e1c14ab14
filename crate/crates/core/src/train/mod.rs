//! Synthetic tasks, losses, AdamW, the deterministic training loop and
//! checkpoint persistence.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod tasks;

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ChelaError, Result};
use crate::layer::{ChelaModel, ModelConfig, Params};
use crate::numerics::{Rng, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{cross_entropy, mse, LossOutput};
pub use optim::{adamw_step, clip_global_norm, AdamWHyper, OptimState};
pub use tasks::{gen_adding_problem, gen_assoc_recall, gen_copy_task, ByteLmStream, TaskBatch, Targets};

/// Data source for [`train_loop`].
#[derive(Clone, Debug)]
pub enum Task {
    Copy { len: usize, vocab: usize },
    AssocRecall { n_pairs: usize, vocab: usize },
    Adding { len: usize },
    ByteLm(ByteLmStream),
}

impl Task {
    pub fn sample(&self, rng: &mut Rng, batch: usize) -> Result<TaskBatch> {
        match self {
            Task::Copy { len, vocab } => gen_copy_task(rng, *len, *vocab, batch),
            Task::AssocRecall { n_pairs, vocab } => gen_assoc_recall(rng, *n_pairs, *vocab, batch),
            Task::Adding { len } => gen_adding_problem(rng, *len, batch),
            Task::ByteLm(s) => s.sample(rng, batch),
        }
    }

    /// Held-out batches: byte corpora use their first non-overlapping
    /// windows, synthetic tasks draw from a generator forked off `rng`.
    pub fn eval_set(&self, rng: &Rng, batches: usize, batch: usize) -> Result<Vec<TaskBatch>> {
        match self {
            Task::ByteLm(s) => Ok(s.eval_windows()?.into_iter().take(batches).collect()),
            _ => {
                let mut r = rng.fork(EVAL_STREAM);
                (0..batches).map(|_| self.sample(&mut r, batch)).collect()
            }
        }
    }

    /// Sequence length the model must support.
    pub fn seq_len(&self) -> usize {
        match self {
            Task::Copy { len, .. } | Task::Adding { len } => *len,
            Task::AssocRecall { n_pairs, .. } => 2 * n_pairs + 1,
            Task::ByteLm(s) => s.window_len(),
        }
    }
}

const EVAL_STREAM: u64 = 0xE7A1;

/// Task families with a desk-scale default model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Recall,
    Adding,
    Bytes,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Recall => "recall",
            TaskKind::Adding => "adding",
            TaskKind::Bytes => "bytes",
        }
    }

    /// Copy: L=64, vocab 8. Recall: 8 pairs over 16 tokens. Adding: L=512.
    /// Bytes: 256-byte windows. All use d=64 and depth 2.
    pub fn default_config(self, seed: u64) -> ModelConfig {
        match self {
            TaskKind::Copy => ModelConfig {
                chunk: 32,
                ..ModelConfig::lm(2, 64, 64, 8, seed)
            },
            TaskKind::Recall => ModelConfig::lm(2, 64, 17, 16, seed),
            TaskKind::Adding => ModelConfig::regression(2, 64, 512, 2, seed),
            TaskKind::Bytes => ModelConfig::lm(2, 64, 256, 256, seed),
        }
    }

    /// Data source shaped to `cfg`; `data` is the corpus for byte modeling.
    pub fn task(self, cfg: &ModelConfig, data: Option<&Path>, batch: usize, seed: u64) -> Result<Task> {
        let need_tokens = |what: &str| {
            if cfg.uses_tokens() {
                Ok(())
            } else {
                Err(ChelaError::InvalidArgument(format!("{what} needs a token (vocab_size) model")))
            }
        };
        Ok(match self {
            TaskKind::Copy => {
                need_tokens("copy task")?;
                Task::Copy {
                    len: cfg.max_len,
                    vocab: cfg.vocab_size,
                }
            }
            TaskKind::Recall => {
                need_tokens("associative recall")?;
                Task::AssocRecall {
                    n_pairs: (cfg.max_len - 1) / 2,
                    vocab: cfg.vocab_size,
                }
            }
            TaskKind::Adding => {
                if cfg.input_dim != 2 {
                    return Err(ChelaError::InvalidArgument("adding problem needs input_dim = 2".into()));
                }
                Task::Adding { len: cfg.max_len }
            }
            TaskKind::Bytes => {
                need_tokens("byte modeling")?;
                if cfg.vocab_size != 256 {
                    return Err(ChelaError::InvalidArgument("byte modeling needs vocab_size = 256".into()));
                }
                let path = data.ok_or_else(|| ChelaError::InvalidArgument("byte modeling needs a corpus file".into()))?;
                Task::ByteLm(ByteLmStream::open(path, cfg.max_len, batch, Rng::new(seed))?)
            }
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "recall" | "assoc-recall" => Ok(TaskKind::Recall),
            "adding" => Ok(TaskKind::Adding),
            "bytes" | "byte-lm" => Ok(TaskKind::Bytes),
            _ => Err(format!("unknown task `{s}` (copy, recall, adding, bytes)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hyper: AdamWHyper,
    /// Linear warmup length; the learning rate is constant afterwards.
    pub warmup: usize,
    pub clip: f64,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub data_seed: u64,
    /// Stop at the first evaluation whose accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            hyper: AdamWHyper::default(),
            warmup: 100,
            clip: 1.0,
            eval_every: 100,
            eval_batches: 4,
            data_seed: 0,
            target_accuracy: None,
            checkpoint_every: None,
            checkpoint_path: None,
            metrics_path: None,
        }
    }
}

/// One line of the metrics trace. Loss and accuracy are held-out values;
/// `grad_norm` is the mean pre-clip norm since the previous row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub struct TrainOutcome {
    pub model: ChelaModel,
    pub optim: OptimState,
    pub trace: Vec<MetricRow>,
    pub steps_run: usize,
    pub rng_state: u64,
}

impl TrainOutcome {
    pub fn final_row(&self) -> &MetricRow {
        self.trace.last().expect("trace holds the initial evaluation")
    }
}

/// Loss of a model output on `batch`, with the cotangent of that output.
pub fn batch_loss(out: &Tensor, batch: &TaskBatch) -> Result<LossOutput> {
    match &batch.targets {
        Targets::Classes(t) => cross_entropy(out, t, &batch.loss_mask),
        Targets::Values(v) => mse(out, v),
    }
}

/// Mean loss and accuracy over `batches`, weighted by counted positions.
pub fn evaluate(model: &ChelaModel, batches: &[TaskBatch]) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut counted) = (0.0, 0usize, 0usize);
    for b in batches {
        let out = model.forward(&b.input)?;
        let l = batch_loss(&out, b)?;
        loss += l.loss * l.counted as f64;
        correct += l.correct;
        counted += l.counted;
    }
    if counted == 0 {
        return Err(ChelaError::Empty("evaluation set"));
    }
    Ok((loss / counted as f64, correct as f64 / counted as f64))
}

fn round_all(ts: Vec<&mut Tensor>) {
    for t in ts {
        t.round_to_f32();
    }
}

struct MetricsSink {
    writer: Option<csv::Writer<std::fs::File>>,
}

impl MetricsSink {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let writer = match path {
            Some(p) => Some(csv::Writer::from_path(p)?),
            None => None,
        };
        Ok(Self { writer })
    }

    fn push(&mut self, row: &MetricRow) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.serialize(row)?;
            w.flush().map_err(|e| ChelaError::io("metrics", e))?;
        }
        Ok(())
    }
}

/// Trains from scratch with a fresh optimizer.
pub fn train_loop(model: ChelaModel, task: &Task, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let optim = OptimState::new(model.params.named().into_iter().map(|(_, t)| t));
    let rng = Rng::new(cfg.data_seed);
    train_from(model, optim, rng, 0, task, cfg)
}

/// Continues training from a checkpoint until `cfg.steps` total steps.
pub fn resume(ck: Checkpoint, task: &Task, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let optim = match ck.optim {
        Some(o) => o,
        None => OptimState::new(ck.model.params.named().into_iter().map(|(_, t)| t)),
    };
    train_from(ck.model, optim, Rng::from_state(ck.rng_state), ck.step as usize, task, cfg)
}

fn train_from(
    mut model: ChelaModel,
    mut optim: OptimState,
    mut rng: Rng,
    start_step: usize,
    task: &Task,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.eval_every == 0 || cfg.eval_batches == 0 {
        return Err(ChelaError::InvalidArgument(
            "batch_size, eval_every and eval_batches must be positive".into(),
        ));
    }
    if task.seq_len() > model.config.max_len {
        return Err(ChelaError::LengthExceeded {
            len: task.seq_len(),
            max: model.config.max_len,
        });
    }
    let eval = task.eval_set(&Rng::new(cfg.data_seed), cfg.eval_batches, cfg.batch_size)?;
    let decay: Vec<bool> = model.params.named().iter().map(|(_, t)| t.rank() >= 2).collect();
    let clock = Instant::now();
    let mut sink = MetricsSink::open(&cfg.metrics_path)?;
    let mut trace = Vec::new();

    let (loss0, acc0) = evaluate(&model, &eval)?;
    let first = MetricRow {
        step: start_step,
        loss: loss0,
        accuracy: acc0,
        grad_norm: 0.0,
        wall_ms: 0.0,
    };
    sink.push(&first)?;
    trace.push(first);
    let mut done = cfg.target_accuracy.is_some_and(|t| acc0 >= t);

    let mut step = start_step;
    let (mut norm_sum, mut norm_count) = (0.0, 0usize);
    while step < cfg.steps && !done {
        step += 1;
        let batch = task.sample(&mut rng, cfg.batch_size)?;
        let (out, cache) = model.forward_cached(&batch.input).map_err(|e| match e {
            ChelaError::NonFinite(_) => ChelaError::Diverged { step, loss: f64::NAN },
            other => other,
        })?;
        let lo = batch_loss(&out, &batch).map_err(|e| match e {
            ChelaError::NonFinite(_) => ChelaError::Diverged { step, loss: f64::NAN },
            other => other,
        })?;
        let mut grads = model.backward(&cache, &lo.grad)?;
        let norm = clip_global_norm(&mut grads.tensors_mut(), cfg.clip);
        if !norm.is_finite() {
            return Err(ChelaError::Diverged { step, loss: lo.loss });
        }
        norm_sum += norm;
        norm_count += 1;
        let lr = cfg.hyper.lr * (step as f64 / cfg.warmup.max(1) as f64).min(1.0);
        let g: Vec<&Tensor> = grads.named().into_iter().map(|(_, t)| t).collect();
        adamw_step(&mut model.params.tensors_mut(), &g, &decay, &mut optim, &cfg.hyper, lr)?;
        round_all(model.params.tensors_mut());
        round_all(optim.m.iter_mut().chain(optim.v.iter_mut()).collect());

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (loss, accuracy) = evaluate(&model, &eval)?;
            if !loss.is_finite() {
                return Err(ChelaError::Diverged { step, loss });
            }
            let row = MetricRow {
                step,
                loss,
                accuracy,
                grad_norm: norm_sum / norm_count.max(1) as f64,
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            };
            sink.push(&row)?;
            trace.push(row);
            norm_sum = 0.0;
            norm_count = 0;
            done = cfg.target_accuracy.is_some_and(|t| accuracy >= t);
        }
        if let (Some(every), Some(path)) = (cfg.checkpoint_every, &cfg.checkpoint_path) {
            if step % every == 0 {
                save(&model, &optim, &rng, step, path)?;
            }
        }
    }
    if let Some(path) = &cfg.checkpoint_path {
        save(&model, &optim, &rng, step, path)?;
    }
    Ok(TrainOutcome {
        model,
        optim,
        trace,
        steps_run: step - start_step,
        rng_state: rng.state(),
    })
}

fn save(model: &ChelaModel, optim: &OptimState, rng: &Rng, step: usize, path: &std::path::Path) -> Result<()> {
    save_checkpoint(
        &Checkpoint {
            model: model.clone(),
            optim: Some(optim.clone()),
            rng_state: rng.state(),
            step: step as u64,
        },
        path,
    )
}
