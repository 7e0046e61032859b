//! Predictor heads over per-layer hidden states of a language model.

pub mod analysis;
pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod compare;
pub mod dataset;
pub mod error;
pub mod predictor;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
