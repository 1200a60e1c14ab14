//! Vector-Jacobian products checked against central finite differences.

use crate::error::{ChelaError, Result};

use super::{Rng, Tensor};

/// An operation with a hand-written reverse-mode rule.
pub trait DifferentiableOp {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;

    /// Input cotangents given the output cotangent, one per input, in order.
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>>;
}

const COTANGENT_SEED: u64 = 0x7A5C_0DE5;

/// Maximum relative disagreement between `op.vjp` and central differences.
///
/// A fixed random cotangent `w` is drawn; for every input element the
/// directional quantity `<w, f(x + h e_j) - f(x - h e_j)> / 2h` is compared
/// with the matching entry of `vjp(x, w)`. Each input uses the step
/// `step * max(1, |x|_inf)`. Per input tensor the error is
/// `|g - n|_inf / max(|g|_inf, |n|_inf)`; the worst over inputs is returned.
pub fn vjp_check(op: &dyn DifferentiableOp, inputs: &[Tensor], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(ChelaError::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let y = op.forward(inputs)?;
    y.ensure_finite("vjp_check forward")?;
    let mut rng = Rng::new(COTANGENT_SEED);
    let w_data: Vec<f64> = (0..y.len()).map(|_| rng.normal(0.0, 1.0)).collect();
    let w = Tensor::from_vec(y.shape(), w_data)?;
    let grads = op.vjp(inputs, &w)?;
    if grads.len() != inputs.len() {
        return Err(ChelaError::Shape(format!(
            "{}: vjp returned {} cotangents for {} inputs",
            op.name(),
            grads.len(),
            inputs.len()
        )));
    }

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        g.same_shape(&inputs[i], "vjp cotangent")?;
        let h = step * inputs[i].max_abs().max(1.0);
        let mut err = 0.0f64;
        let mut scale = g.max_abs();
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = op.forward(&work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = op.forward(&work)?;
            work[i].data_mut()[j] = orig;
            let num = fp
                .data()
                .iter()
                .zip(fm.data())
                .zip(w.data())
                .map(|((a, b), c)| (a - b) * c)
                .sum::<f64>()
                / (2.0 * h);
            if !num.is_finite() {
                return Err(ChelaError::NonFinite("vjp_check finite difference"));
            }
            err = err.max((num - g.data()[j]).abs());
            scale = scale.max(num.abs());
        }
        if scale > 0.0 {
            worst = worst.max(err / scale);
        }
    }
    Ok(worst)
}
