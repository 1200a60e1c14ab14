//! Masked cross-entropy and mean-squared error, each returning the loss and
//! its gradient with respect to the model output.

use crate::error::{ChelaError, Result};
use crate::numerics::Tensor;

/// Loss value, output cotangent and prediction counts.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Tensor,
    /// Positions whose argmax equals the target (classification losses).
    pub correct: usize,
    /// Positions contributing to the loss.
    pub counted: usize,
}

impl LossOutput {
    pub fn accuracy(&self) -> f64 {
        if self.counted == 0 {
            0.0
        } else {
            self.correct as f64 / self.counted as f64
        }
    }
}

/// Mean over unmasked rows of `-log softmax(logits_row)[target]`.
///
/// `logits` is read as rows of its last dimension; `targets` and `mask` have
/// one entry per row.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<LossOutput> {
    let vocab = *logits.shape().last().expect("rank >= 1");
    let rows = logits.len() / vocab;
    if targets.len() != rows || mask.len() != rows {
        return Err(ChelaError::Shape(format!(
            "cross_entropy: {rows} rows, {} targets, {} mask flags",
            targets.len(),
            mask.len()
        )));
    }
    let counted = mask.iter().filter(|&&m| m).count();
    if counted == 0 {
        return Err(ChelaError::Empty("cross_entropy mask"));
    }
    let inv = 1.0 / counted as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let mut correct = 0;
    for (r, (row, g)) in logits
        .data()
        .chunks_exact(vocab)
        .zip(grad.data_mut().chunks_exact_mut(vocab))
        .enumerate()
    {
        if !mask[r] {
            continue;
        }
        let t = targets[r];
        if t >= vocab {
            return Err(ChelaError::OutOfVocabulary { token: t, vocab });
        }
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
        for (j, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                arg = j;
            }
        }
        if arg == t {
            correct += 1;
        }
        let z: f64 = row.iter().map(|&v| (v - best).exp()).sum();
        let lse = best + z.ln();
        total += lse - row[t];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - lse).exp() * inv;
        }
        g[t] -= inv;
    }
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(ChelaError::NonFinite("cross_entropy"));
    }
    Ok(LossOutput {
        loss,
        grad,
        correct,
        counted,
    })
}

/// Mean of `(pred - target)^2` over all entries.
pub fn mse(pred: &Tensor, targets: &[f64]) -> Result<LossOutput> {
    if pred.len() != targets.len() {
        return Err(ChelaError::Shape(format!(
            "mse: {} predictions, {} targets",
            pred.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(ChelaError::Empty("mse"));
    }
    let n = targets.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(targets) {
        let e = p - t;
        total += e * e;
        *g = 2.0 * e / n;
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(ChelaError::NonFinite("mse"));
    }
    Ok(LossOutput {
        loss,
        grad,
        correct: 0,
        counted: targets.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::Rng;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros(&[3, 4]);
        let out = cross_entropy(&logits, &[0, 1, 3], &[true; 3]).unwrap();
        assert!((out.loss - 1.386_294_361_119_890_6).abs() < 1e-12);
    }

    #[test]
    fn huge_correct_logit_saturates() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.0, 800.0, 0.0]).unwrap();
        let out = cross_entropy(&logits, &[1], &[true]).unwrap();
        assert!(out.loss < 1e-300);
        assert_eq!(out.correct, 1);
    }

    #[test]
    fn matches_log_sum_exp_oracle() {
        let mut rng = Rng::new(4);
        let (rows, v) = (9, 7);
        let data: Vec<f64> = (0..rows * v).map(|_| rng.normal(0.0, 3.0)).collect();
        let targets: Vec<usize> = (0..rows).map(|_| rng.below(v)).collect();
        let mask: Vec<bool> = (0..rows).map(|i| i % 3 != 1).collect();
        let logits = Tensor::from_vec(&[rows, v], data.clone()).unwrap();
        let got = cross_entropy(&logits, &targets, &mask).unwrap().loss;
        let mut terms = Vec::new();
        for r in (0..rows).filter(|&r| mask[r]) {
            let row = &data[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + oracle::compensated_sum(row.iter().map(|x| (x - m).exp())).ln();
            terms.push(lse - row[targets[r]]);
        }
        let want = oracle::compensated_sum(terms.iter().copied()) / terms.len() as f64;
        assert!(((got - want) / want).abs() <= 1e-10);
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let logits = Tensor::from_vec(&[2, 2], vec![5.0, -5.0, 1.0, 2.0]).unwrap();
        let out = cross_entropy(&logits, &[1, 1], &[false, true]).unwrap();
        assert!(out.grad.data()[..2].iter().all(|&g| g == 0.0));
        assert!(matches!(
            cross_entropy(&logits, &[1, 1], &[false, false]),
            Err(ChelaError::Empty(_))
        ));
        assert!(matches!(
            cross_entropy(&logits, &[2, 1], &[true, true]),
            Err(ChelaError::OutOfVocabulary { .. })
        ));
    }

    #[test]
    fn mse_values() {
        let p = Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        let out = mse(&p, &[0.0, 1.0]).unwrap();
        assert_eq!(out.loss, 2.5);
        assert_eq!(out.grad.data(), &[1.0, 2.0]);
    }
}
