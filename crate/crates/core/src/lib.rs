//! Chunked hardware-efficient linear attention with short-long convolutions.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: tensors, FFT, activations, norms, PRNG, gradient checks
//! * [`ssm`]: HiPPO-initialized state-space reference stack
//! * [`conv`]: causal depthwise convolutions, short-long module, fusion
//! * [`attention`]: softmax baseline and the three linear-attention forms
//! * [`layer`]: the gated layer, pre-norm block and full model
//! * [`train`]: synthetic tasks, losses, AdamW, training loop, checkpoints
//! * [`bench`], [`verify`], [`cli`]: benchmarks, oracle suite, command line

pub mod attention;
pub mod bench;
pub mod cli;
pub mod conv;
pub mod diffops;
pub mod error;
pub mod layer;
pub mod numerics;
pub mod oracle;
pub mod ssm;
pub mod train;
pub mod verify;

pub use error::{ChelaError, Result};
pub use numerics::{Rng, Tensor};
