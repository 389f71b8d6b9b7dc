//! Per-prompt denoising-step budgets for text-to-image diffusion.
//!
//! A BiLSTM predicts each prompt's perceptual-quality curves over the
//! denoising steps; a plateau rule on those curves picks the step budget.

pub mod budget;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod formats;
pub mod imagemetrics;
pub mod predictor;
pub mod stats;
pub mod types;

pub use error::{Error, Result};
