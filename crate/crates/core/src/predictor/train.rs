use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::PredictorCheckpoint;
use super::network::{batch_gradient, Network};
use super::params::{Layout, PredictorParams};
use super::{ModelConfig, TrainingExample};
use crate::error::{Error, Result};
use crate::formats::Split;
use crate::types::{MetricKind, TimestepGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, lr: f64, n: usize) -> Self {
        Self { cfg, lr, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch (dropout active).
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_mae: Option<f64>,
}

/// Knobs that do not change the trained model's architecture.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainOptions {
    pub adam: AdamConfig,
}

fn dropout_mask<R: Rng>(rng: &mut R, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

fn evaluate(config: &ModelConfig, layout: &Layout, params: &PredictorParams, examples: &[&TrainingExample]) -> Result<(f64, f64)> {
    let net = Network::new(config, layout, params)?;
    let per: Vec<Result<(f64, f64, usize)>> = examples
        .par_iter()
        .map(|ex| {
            let steps = config.sequence_steps(ex.t_n());
            let out = net.forward_seq(ex.prompt_embedding.values(), &steps, None)?.out;
            let targets = ex.targets_at(&steps);
            let (mut se, mut ae) = (0.0, 0.0);
            for (s, y) in out.iter().zip(&targets) {
                se += (s - y) * (s - y);
                ae += (s - y).abs();
            }
            Ok((se, ae, steps.len()))
        })
        .collect();
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for r in per {
        let (a, b, c) = r?;
        se += a;
        ae += b;
        n += c;
    }
    Ok((se / n as f64, ae / n as f64))
}

/// Mini-batch Adam on MSE with dropout on the top BiLSTM output.
///
/// Deterministic for a fixed `config.rng_seed` regardless of thread count.
/// The returned parameters are rounded to `f32` so that the checkpoint file
/// reproduces them exactly.
pub fn train(
    config: &ModelConfig,
    metric: MetricKind,
    grid: &TimestepGrid,
    examples: &[TrainingExample],
    split: &Split,
) -> Result<PredictorCheckpoint> {
    train_with(config, metric, grid, examples, split, TrainOptions::default())
}

pub fn train_with(
    config: &ModelConfig,
    metric: MetricKind,
    grid: &TimestepGrid,
    examples: &[TrainingExample],
    split: &Split,
    options: TrainOptions,
) -> Result<PredictorCheckpoint> {
    config.validate()?;
    let t_n = grid.reference_step();
    let by_id: HashMap<u64, &TrainingExample> = examples.iter().map(|e| (e.prompt_id, e)).collect();
    for ex in examples {
        if ex.metric != metric {
            return Err(Error::Validation(format!(
                "example for prompt {} is {}, training {metric}",
                ex.prompt_id, ex.metric
            )));
        }
        if ex.t_n() != t_n {
            return Err(Error::Shape(format!(
                "prompt {} has {} targets, grid ends at {t_n}",
                ex.prompt_id,
                ex.targets.len()
            )));
        }
        if ex.prompt_embedding.dim() != config.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt {} embedding dim {} != prompt_dim {}",
                ex.prompt_id,
                ex.prompt_embedding.dim(),
                config.prompt_dim
            )));
        }
    }
    let pick = |ids: &[u64]| -> Result<Vec<TrainingExample>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id)
                    .map(|e| (*e).clone())
                    .ok_or_else(|| Error::Validation(format!("split references unknown prompt {id}")))
            })
            .collect()
    };
    let train_set = pick(&split.train)?;
    let val_set = pick(&split.eval)?;
    if train_set.is_empty() {
        return Err(Error::Validation("empty training split".into()));
    }

    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut params = PredictorParams::init(&layout, &mut rng);
    let mut adam = Adam::new(options.adam, config.learning_rate, layout.len());
    let seq_len = config.sequence_steps(t_n).len();
    let mask_len = seq_len * 2 * config.hidden;
    let val_refs: Vec<&TrainingExample> = val_set.iter().collect();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let masks: Option<Vec<Vec<f64>>> = (config.dropout_rate > 0.0)
                .then(|| batch.iter().map(|_| dropout_mask(&mut rng, mask_len, config.dropout_rate)).collect());
            let (loss, grad) = batch_gradient(config, &layout, &params, &batch, masks.as_deref())?;
            if !loss.is_finite() || grad.as_slice().iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "{metric}: non-finite loss {loss} at epoch {epoch}, batch {b} (prompts {:?})",
                    batch.iter().map(|e| e.prompt_id).collect::<Vec<_>>()
                )));
            }
            adam.update(params.as_mut_slice(), grad.as_slice());
            loss_sum += loss;
            batches += 1;
        }
        let (val_loss, val_mae) = if val_refs.is_empty() {
            (None, None)
        } else {
            let (l, m) = evaluate(config, &layout, &params, &val_refs)?;
            (Some(l), Some(m))
        };
        let stats = EpochStats { epoch, train_loss: loss_sum / batches as f64, val_loss, val_mae };
        log::info!(
            "{metric} epoch {epoch}/{}: train {:.5} val {:?} mae {:?}",
            config.epochs,
            stats.train_loss,
            val_loss,
            val_mae
        );
        trace.push(stats);
    }

    params.round_to_f32();
    Ok(PredictorCheckpoint {
        config: config.clone(),
        metric,
        grid: grid.clone(),
        training_seed: config.rng_seed,
        loss_trace: trace,
        params,
    })
}
