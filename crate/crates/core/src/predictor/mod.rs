//! Bidirectional-LSTM regressor mapping (prompt embedding, timestep) to a
//! metric score in (0, 1).
//!
//! The input at step `t` is `project(prompt) + position(t)`. Each BiLSTM layer
//! concatenates forward and backward hidden states; the last layer's output
//! goes through dropout (training only), an MLP with ReLU hidden layers, and
//! a final sigmoid. One independent model is trained per metric.

mod checkpoint;
mod network;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, predict_series, save_checkpoint, PredictorCheckpoint, BFCK_MAGIC};
pub use network::{backward, forward};
pub use params::{Layout, PredictorParams, TensorSpec};
pub use train::{train, train_with, AdamConfig, EpochStats, TrainOptions};

#[cfg(test)]
pub(crate) use network::bilstm_layer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EmbeddingVector, MetricKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of the incoming prompt embeddings. A learned linear projection
    /// maps them to `embed_dim` when the two differ.
    pub prompt_dim: usize,
    pub embed_dim: usize,
    /// Per-direction LSTM width.
    pub hidden: usize,
    pub num_layers: usize,
    pub mlp_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    /// Add the sinusoidal timestep embedding to the input. Off only for ablations.
    pub use_position: bool,
    /// Train and predict on every `step_stride`-th step of `1..=t_N`.
    pub step_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prompt_dim: 64,
            embed_dim: 64,
            hidden: 64,
            num_layers: 2,
            mlp_dims: vec![128, 128, 1],
            dropout_rate: 0.2,
            learning_rate: 2e-3,
            batch_size: 4,
            epochs: 25,
            rng_seed: 0,
            use_position: true,
            step_stride: 1,
        }
    }
}

impl ModelConfig {
    /// Full-size architecture: 2-layer BiLSTM of width 512, MLP 1024 -> 128 -> 1,
    /// batch 32, learning rate 1e-4.
    pub fn paper_scale(prompt_dim: usize, epochs: usize) -> Self {
        Self {
            prompt_dim,
            embed_dim: prompt_dim,
            hidden: 512,
            mlp_dims: vec![1024, 128, 1],
            learning_rate: 1e-4,
            batch_size: 32,
            epochs,
            ..Self::default()
        }
    }

    /// A small model with the given widths and MLP `[2 * hidden, 2 * hidden, 1]`.
    pub fn tiny(prompt_dim: usize, embed_dim: usize, hidden: usize, num_layers: usize) -> Self {
        Self {
            prompt_dim,
            embed_dim,
            hidden,
            num_layers,
            mlp_dims: vec![2 * hidden, 2 * hidden, 1],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.prompt_dim == 0 || self.embed_dim == 0 || self.hidden == 0 || self.num_layers == 0 {
            return bad("prompt_dim, embed_dim, hidden and num_layers must be positive".into());
        }
        if self.use_position && self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim must be even for positional embeddings, got {}", self.embed_dim));
        }
        if self.mlp_dims.len() < 2
            || self.mlp_dims[0] != 2 * self.hidden
            || *self.mlp_dims.last().unwrap() != 1
            || self.mlp_dims.contains(&0)
        {
            return bad(format!(
                "mlp_dims must start at 2 * hidden = {} and end at 1, got {:?}",
                2 * self.hidden,
                self.mlp_dims
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.step_stride == 0 {
            return bad("batch_size, epochs and step_stride must be positive".into());
        }
        Ok(())
    }

    /// Steps fed to the network for a reference step `t_n`: every
    /// `step_stride`-th step from 1, always ending at `t_n`.
    pub fn sequence_steps(&self, t_n: u32) -> Vec<u32> {
        let mut steps: Vec<u32> = (1..=t_n).step_by(self.step_stride).collect();
        if steps.last() != Some(&t_n) {
            steps.push(t_n);
        }
        steps
    }
}

/// Sinusoidal timestep embedding: entry `2k` is `sin(t / 10000^(2k/dim))`,
/// entry `2k+1` the matching cosine.
pub fn position_embedding(t: u32, dim: usize) -> Result<EmbeddingVector> {
    let mut out = vec![0.0; dim];
    write_position_embedding(t, dim, &mut out)?;
    EmbeddingVector::new(out)
}

pub(crate) fn write_position_embedding(t: u32, dim: usize, out: &mut [f64]) -> Result<()> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Validation(format!("position embedding dim must be even and positive, got {dim}")));
    }
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * k as f64 / dim as f64);
        let angle = t as f64 / freq;
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    Ok(())
}

/// Mean squared error.
pub fn loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} entries, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Validation("loss over an empty sequence".into()));
    }
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sse / pred.len() as f64)
}

/// One prompt's dense target curve for a single metric over `1..=t_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub prompt_id: u64,
    pub prompt_embedding: EmbeddingVector,
    pub metric: MetricKind,
    pub targets: Vec<f64>,
}

impl TrainingExample {
    pub fn new(prompt_id: u64, prompt_embedding: EmbeddingVector, metric: MetricKind, targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Validation(format!("prompt {prompt_id}: empty targets")));
        }
        if let Some(v) = targets.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("prompt {prompt_id}: target {v} outside [0, 1]")));
        }
        Ok(Self { prompt_id, prompt_embedding, metric, targets })
    }

    pub fn t_n(&self) -> u32 {
        self.targets.len() as u32
    }

    /// Targets at the given (1-based) steps.
    pub(crate) fn targets_at(&self, steps: &[u32]) -> Vec<f64> {
        steps.iter().map(|&t| self.targets[t as usize - 1]).collect()
    }
}
