//! Masked language model pre-training with instance regularization.
//!
//! Alongside the usual denoising loss, every training step penalises how
//! far the corrupted input's hidden states drift from the original's, and
//! how far the prediction-filled sequence's hidden states drift from the
//! original's. Both penalties compare softmax-normalised hidden vectors
//! position by position.

pub mod checkpoint;
pub mod ennoise;
pub mod error;
pub mod eval;
pub mod model;
pub mod regularizer;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
