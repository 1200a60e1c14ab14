//! Numerical substrate: tensors, FFT, activations, normalizations, the
//! deterministic PRNG and the gradient-verification harness.

pub mod fft;
pub mod gemm;
pub mod gradcheck;
pub mod ops;
pub mod rng;
mod scalar;
mod tensor;

pub use fft::{fft, FftPlan};
pub use gemm::{gemm, matmul, MatRef};
pub use gradcheck::{vjp_check, DifferentiableOp};
pub use ops::{activation, layer_norm, rms_norm, sigmoid, silu, silu_grad, ActivationKind};
pub use rng::{prng_fill, Distribution, Rng};
pub use scalar::Scalar;
pub use tensor::Tensor;
