use crate::error::{ChelaError, Result};

use super::Scalar;

/// Dense row-major array of rank 1 to 3. Canonical sequence layout is
/// `[batch, length, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(ChelaError::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ChelaError::NonFinite("Tensor::from_vec"));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape; for internally constructed tensors.
    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interprets the tensor as `[batch, length, dim]`, promoting lower ranks
    /// by prepending unit axes.
    pub fn dims3(&self) -> (usize, usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, 1, *n),
            [l, d] => (1, *l, *d),
            [b, l, d] => (*b, *l, *d),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(ChelaError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ChelaError::NonFinite(op))
        }
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.widen() * v.widen()).sum()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(ChelaError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }
}

impl Tensor<f64> {
    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Rounds every element to the nearest `f32`, keeping `f64` storage.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(ChelaError::Shape(format!(
            "rank must be 1..=3, got {}",
            shape.len()
        )));
    }
    if shape.iter().any(|&s| s == 0) {
        return Err(ChelaError::Shape(format!(
            "dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_length_must_agree() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]),
            Err(ChelaError::Shape(_))
        ));
        assert!(Tensor::<f64>::from_vec(&[1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f64>::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let err = Tensor::<f64>::from_vec(&[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, ChelaError::NonFinite(_)));
    }

    #[test]
    fn dims3_promotes_lower_ranks() {
        assert_eq!(Tensor::<f64>::zeros(&[4]).dims3(), (1, 1, 4));
        assert_eq!(Tensor::<f64>::zeros(&[5, 4]).dims3(), (1, 5, 4));
        assert_eq!(Tensor::<f64>::zeros(&[2, 5, 4]).dims3(), (2, 5, 4));
    }
}
