//! Generative regression toolkit.
//!
//! Predicts a continuous nonnegative scalar (watch time, lifetime value,
//! any long-tailed target) by tokenizing the target into a value
//! vocabulary and generating token sequences autoregressively with an
//! encoder-decoder model. Includes vocabulary construction, the label
//! codec, curriculum training with embedding mixup, greedy decoding,
//! evaluation metrics, and reference baseline heads.

pub mod error;
pub mod fingerprint;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod gradcheck;
pub mod optim;
pub mod vocab;
pub mod model;
pub mod metrics;
pub mod training;
pub mod inference;
pub mod baselines;
pub mod checkpoint;
pub mod manifest;
pub mod codec;
pub mod data;

pub use error::{GrError, Result};
pub use tensor::Tensor;
