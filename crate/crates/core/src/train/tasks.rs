//! Synthetic tasks and the byte-level language-modeling stream.

use std::path::Path;

use crate::error::{ChelaError, Result};
use crate::layer::ModelInput;
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One class id per output row.
    Classes(Vec<usize>),
    /// One value per output entry.
    Values(Vec<f64>),
}

/// Inputs, targets and the per-row loss mask of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub input: ModelInput,
    pub targets: Targets,
    pub loss_mask: Vec<bool>,
}

/// Token reserved as the copy delimiter; content tokens are `1..vocab`.
pub const COPY_DELIMITER: usize = 0;

/// First `L/2` positions hold random content tokens, the rest hold the
/// delimiter; at position `L/2 + i` the target is content token `i`. Loss
/// applies to the second half only.
pub fn gen_copy_task(rng: &mut Rng, len: usize, vocab: usize, batch: usize) -> Result<TaskBatch> {
    if len < 2 || len % 2 != 0 {
        return Err(ChelaError::InvalidArgument(format!("copy task needs an even length >= 2, got {len}")));
    }
    if vocab < 3 {
        return Err(ChelaError::InvalidArgument(format!("copy task needs vocab >= 3, got {vocab}")));
    }
    if batch == 0 {
        return Err(ChelaError::InvalidArgument("batch must be positive".into()));
    }
    let half = len / 2;
    let mut ids = Vec::with_capacity(batch * len);
    let mut targets = Vec::with_capacity(batch * len);
    let mut mask = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let content: Vec<usize> = (0..half).map(|_| 1 + rng.below(vocab - 1)).collect();
        ids.extend_from_slice(&content);
        ids.extend(std::iter::repeat(COPY_DELIMITER).take(half));
        targets.extend(std::iter::repeat(COPY_DELIMITER).take(half));
        targets.extend_from_slice(&content);
        mask.extend(std::iter::repeat(false).take(half));
        mask.extend(std::iter::repeat(true).take(half));
    }
    Ok(TaskBatch {
        input: ModelInput::tokens(ids, batch, len)?,
        targets: Targets::Classes(targets),
        loss_mask: mask,
    })
}

/// `k_1 v_1 ... k_n v_n q`: distinct keys from the lower half of the
/// vocabulary, distinct values from the upper half, `q` one of the keys.
/// The target at the final position is the value paired with `q`.
pub fn gen_assoc_recall(rng: &mut Rng, n_pairs: usize, vocab: usize, batch: usize) -> Result<TaskBatch> {
    if n_pairs == 0 || vocab < 2 * n_pairs {
        return Err(ChelaError::InvalidArgument(format!(
            "associative recall needs vocab >= 2 * n_pairs (vocab {vocab}, pairs {n_pairs})"
        )));
    }
    if batch == 0 {
        return Err(ChelaError::InvalidArgument("batch must be positive".into()));
    }
    let len = 2 * n_pairs + 1;
    let half = vocab / 2;
    let mut ids = Vec::with_capacity(batch * len);
    let mut targets = vec![0; batch * len];
    let mut mask = vec![false; batch * len];
    for bi in 0..batch {
        let keys = rng.distinct(half, n_pairs);
        let values: Vec<usize> = rng.distinct(vocab - half, n_pairs).into_iter().map(|v| v + half).collect();
        for (k, v) in keys.iter().zip(&values) {
            ids.push(*k);
            ids.push(*v);
        }
        let pick = rng.below(n_pairs);
        ids.push(keys[pick]);
        targets[bi * len + len - 1] = values[pick];
        mask[bi * len + len - 1] = true;
    }
    Ok(TaskBatch {
        input: ModelInput::tokens(ids, batch, len)?,
        targets: Targets::Classes(targets),
        loss_mask: mask,
    })
}

/// Two feature channels: uniform(0, 1) values and a marker channel with
/// exactly two ones at distinct positions. Target: sum of the two marked
/// values.
pub fn gen_adding_problem(rng: &mut Rng, len: usize, batch: usize) -> Result<TaskBatch> {
    if len < 2 {
        return Err(ChelaError::InvalidArgument(format!("adding problem needs length >= 2, got {len}")));
    }
    if batch == 0 {
        return Err(ChelaError::InvalidArgument("batch must be positive".into()));
    }
    let mut x = Vec::with_capacity(batch * len * 2);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let vals: Vec<f64> = (0..len).map(|_| rng.uniform()).collect();
        let marks = rng.distinct(len, 2);
        for (t, &v) in vals.iter().enumerate() {
            x.push(v);
            x.push(if marks.contains(&t) { 1.0 } else { 0.0 });
        }
        targets.push(vals[marks[0]] + vals[marks[1]]);
    }
    Ok(TaskBatch {
        input: ModelInput::Features(Tensor::from_vec(&[batch, len, 2], x)?),
        targets: Targets::Values(targets),
        loss_mask: vec![true; batch],
    })
}

/// Next-byte prediction windows over a file, vocabulary 256.
#[derive(Clone, Debug)]
pub struct ByteLmStream {
    data: Vec<u8>,
    len: usize,
    batch: usize,
    rng: Rng,
}

impl ByteLmStream {
    pub fn open(path: &Path, len: usize, batch: usize, rng: Rng) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| ChelaError::io(path, e))?;
        Self::from_bytes(data, len, batch, rng)
    }

    pub fn from_bytes(data: Vec<u8>, len: usize, batch: usize, rng: Rng) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(ChelaError::InvalidArgument("window length and batch must be positive".into()));
        }
        let need = batch * (len + 1);
        if data.len() < need {
            return Err(ChelaError::InvalidArgument(format!(
                "byte corpus has {} bytes, needs at least {need}",
                data.len()
            )));
        }
        Ok(Self { data, len, batch, rng })
    }

    pub fn rng_state(&self) -> u64 {
        self.rng.state()
    }

    fn window(&self, offsets: &[usize]) -> Result<TaskBatch> {
        let l = self.len;
        let mut ids = Vec::with_capacity(offsets.len() * l);
        let mut targets = Vec::with_capacity(offsets.len() * l);
        for &o in offsets {
            ids.extend(self.data[o..o + l].iter().map(|&b| b as usize));
            targets.extend(self.data[o + 1..o + l + 1].iter().map(|&b| b as usize));
        }
        Ok(TaskBatch {
            input: ModelInput::tokens(ids, offsets.len(), l)?,
            targets: Targets::Classes(targets),
            loss_mask: vec![true; offsets.len() * l],
        })
    }

    /// Windows at seeded uniform offsets.
    pub fn next_batch(&mut self) -> Result<TaskBatch> {
        let mut rng = self.rng.clone();
        let b = self.sample(&mut rng, self.batch);
        self.rng = rng;
        b
    }

    /// `batch` windows at offsets drawn from an external generator.
    pub fn sample(&self, rng: &mut Rng, batch: usize) -> Result<TaskBatch> {
        let span = self.data.len() - self.len;
        let offsets: Vec<usize> = (0..batch).map(|_| rng.below(span)).collect();
        self.window(&offsets)
    }

    pub fn window_len(&self) -> usize {
        self.len
    }

    /// Non-overlapping windows from the start of the corpus, batched.
    pub fn eval_windows(&self) -> Result<Vec<TaskBatch>> {
        let count = (self.data.len() - 1) / self.len;
        let offsets: Vec<usize> = (0..count).map(|i| i * self.len).collect();
        offsets.chunks(self.batch).map(|c| self.window(c)).collect()
    }
}

impl Iterator for ByteLmStream {
    type Item = Result<TaskBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(b: &TaskBatch) -> &[usize] {
        match &b.input {
            ModelInput::Tokens { ids, .. } => ids,
            _ => panic!("token batch expected"),
        }
    }

    fn classes(b: &TaskBatch) -> &[usize] {
        match &b.targets {
            Targets::Classes(c) => c,
            _ => panic!("class targets expected"),
        }
    }

    #[test]
    fn copy_task_contract() {
        let a = gen_copy_task(&mut Rng::new(1), 16, 8, 3).unwrap();
        let b = gen_copy_task(&mut Rng::new(1), 16, 8, 3).unwrap();
        assert_eq!(a, b);
        let (x, y) = (ids(&a), classes(&a));
        for bi in 0..3 {
            for i in 0..8 {
                assert_eq!(y[bi * 16 + 8 + i], x[bi * 16 + i]);
                assert!(a.loss_mask[bi * 16 + 8 + i] && !a.loss_mask[bi * 16 + i]);
                assert_eq!(x[bi * 16 + 8 + i], COPY_DELIMITER);
            }
        }
        assert!(gen_copy_task(&mut Rng::new(1), 15, 8, 1).is_err());
        assert!(gen_copy_task(&mut Rng::new(1), 16, 2, 1).is_err());
    }

    #[test]
    fn copy_task_random_predictor_baseline() {
        let mut rng = Rng::new(2);
        let batch = gen_copy_task(&mut rng, 64, 8, 320).unwrap();
        let y = classes(&batch);
        let mut hits = 0;
        let mut n = 0;
        for (i, &m) in batch.loss_mask.iter().enumerate() {
            if m {
                n += 1;
                if rng.below(8) == y[i] {
                    hits += 1;
                }
            }
        }
        assert!(n >= 10_000);
        assert!((hits as f64 / n as f64 - 1.0 / 8.0).abs() <= 0.02);
    }

    #[test]
    fn assoc_recall_contract() {
        let mut rng = Rng::new(3);
        let b = gen_assoc_recall(&mut rng, 4, 16, 50).unwrap();
        let (x, y) = (ids(&b), classes(&b));
        for bi in 0..50 {
            let s = &x[bi * 9..(bi + 1) * 9];
            let q = s[8];
            let hits: Vec<usize> = (0..4).filter(|&i| s[2 * i] == q).collect();
            assert_eq!(hits.len(), 1);
            assert_eq!(y[bi * 9 + 8], s[2 * hits[0] + 1]);
            assert!(b.loss_mask[bi * 9 + 8] && b.loss_mask[bi * 9..bi * 9 + 8].iter().all(|&m| !m));
        }
        assert!(gen_assoc_recall(&mut rng, 9, 16, 1).is_err());
    }

    #[test]
    fn adding_problem_contract() {
        let mut rng = Rng::new(4);
        let b = gen_adding_problem(&mut rng, 50, 2000).unwrap();
        let x = match &b.input {
            ModelInput::Features(t) => t.clone(),
            _ => panic!(),
        };
        let Targets::Values(y) = &b.targets else { panic!() };
        let mut sq = 0.0;
        for bi in 0..2000 {
            let marks = (0..50).filter(|&t| x.data()[(bi * 50 + t) * 2 + 1] == 1.0).count();
            assert_eq!(marks, 2);
            assert!((0.0..=2.0).contains(&y[bi]));
            sq += (y[bi] - 1.0).powi(2);
        }
        // a constant prediction of 1.0 has expected MSE Var(U1 + U2) = 1/6
        assert!((sq / 2000.0 - 1.0 / 6.0).abs() < 0.015);
    }

    #[test]
    fn byte_stream_shift_and_reproducibility() {
        let data: Vec<u8> = (0..500u32).map(|i| (i * 7 % 256) as u8).collect();
        let mut s = ByteLmStream::from_bytes(data.clone(), 16, 4, Rng::new(5)).unwrap();
        let mut s2 = ByteLmStream::from_bytes(data.clone(), 16, 4, Rng::new(5)).unwrap();
        let b = s.next_batch().unwrap();
        assert_eq!(b, s2.next().unwrap().unwrap());
        let (x, y) = (ids(&b), classes(&b));
        for w in 0..4 {
            for t in 0..15 {
                assert_eq!(y[w * 16 + t], x[w * 16 + t + 1]);
            }
        }
        assert!(ByteLmStream::from_bytes(vec![0; 10], 16, 1, Rng::new(0)).is_err());
        let ev = s.eval_windows().unwrap();
        assert_eq!(ev.iter().map(|b| b.input.batch_len().0).sum::<usize>(), 499 / 16);
    }
}
