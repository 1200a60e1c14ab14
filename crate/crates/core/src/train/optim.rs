//! AdamW with bias correction and decoupled weight decay.

use crate::error::{ChelaError, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One AdamW update at learning rate `lr` (overrides `hyper.lr`, so callers
/// can schedule it). `decay[i]` selects which tensors receive weight decay.
///
/// Non-finite gradients abort the step before anything is modified.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    decay: &[bool],
    state: &mut OptimState,
    hyper: &AdamWHyper,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || decay.len() != params.len() {
        return Err(ChelaError::Shape(format!(
            "adamw: {} params, {} grads, {} moments, {} decay flags",
            params.len(),
            grads.len(),
            state.m.len(),
            decay.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(ChelaError::Shape(format!("adamw: param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(ChelaError::NonFinite("adamw gradient"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if decay[i] { hyper.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = hyper.beta1 * *mj + (1.0 - hyper.beta1) * gj;
            *vj = hyper.beta2 * *vj + (1.0 - hyper.beta2) * gj * gj;
            let mhat = *mj / c1;
            let vhat = *vj / c2;
            *pj -= lr * (mhat / (vhat.sqrt() + hyper.eps) + wd * *pj);
        }
    }
    Ok(())
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[&Tensor]) -> f64 {
    grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    fn step(theta: f64, g: f64, hyper: AdamWHyper) -> f64 {
        let mut p = scalar(theta);
        let gr = scalar(g);
        let mut st = OptimState::new([&p]);
        adamw_step(&mut [&mut p], &[&gr], &[true], &mut st, &hyper, hyper.lr).unwrap();
        p.data()[0]
    }

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let h = AdamWHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(step(0.7, 0.0, h), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let h = AdamWHyper {
            lr: 0.1,
            eps: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        assert!((step(0.0, 1.0, h) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn pure_decay() {
        let h = AdamWHyper {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        assert!((step(2.0, 0.0, h) - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = scalar(1.0);
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut st = OptimState::new([&p]);
        let mut bad = g.clone();
        bad.data_mut()[0] = f64::NAN;
        let r = adamw_step(&mut [&mut p], &[&bad], &[true], &mut st, &AdamWHyper::default(), 0.1);
        assert!(matches!(r, Err(ChelaError::NonFinite(_))));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut a = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let n = clip_global_norm(&mut [&mut a], 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&[&a]) - 1.0).abs() < 1e-15);
    }
}
