use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LstmSlots {
    pub w_ih: usize,
    pub w_hh: usize,
    pub bias: usize,
    pub input: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DenseSlots {
    pub weight: usize,
    pub bias: usize,
    pub input: usize,
    pub output: usize,
}

/// Flat-buffer offsets of every tensor, derived from a [`ModelConfig`].
///
/// Gate rows are stacked in the order input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Layout {
    pub(crate) specs: Vec<TensorSpec>,
    pub(crate) offsets: Vec<usize>,
    pub(crate) projection: Option<DenseSlots>,
    pub(crate) lstm: Vec<[LstmSlots; 2]>,
    pub(crate) mlp: Vec<DenseSlots>,
    pub(crate) hidden: usize,
    pub(crate) total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut offsets = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape };
            let off = total;
            total += spec.numel();
            specs.push(spec);
            offsets.push(off);
            off
        };

        let projection = (cfg.prompt_dim != cfg.embed_dim).then(|| DenseSlots {
            weight: push("input_proj.weight".into(), vec![cfg.embed_dim, cfg.prompt_dim]),
            bias: push("input_proj.bias".into(), vec![cfg.embed_dim]),
            input: cfg.prompt_dim,
            output: cfg.embed_dim,
        });

        let h = cfg.hidden;
        let mut lstm = Vec::with_capacity(cfg.num_layers);
        for layer in 0..cfg.num_layers {
            let input = if layer == 0 { cfg.embed_dim } else { 2 * h };
            let mut dir = |d: &str| LstmSlots {
                w_ih: push(format!("lstm.{layer}.{d}.w_ih"), vec![4 * h, input]),
                w_hh: push(format!("lstm.{layer}.{d}.w_hh"), vec![4 * h, h]),
                bias: push(format!("lstm.{layer}.{d}.bias"), vec![4 * h]),
                input,
            };
            let fwd = dir("fwd");
            let bwd = dir("bwd");
            lstm.push([fwd, bwd]);
        }

        let mlp = cfg
            .mlp_dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| DenseSlots {
                weight: push(format!("mlp.{k}.weight"), vec![d[1], d[0]]),
                bias: push(format!("mlp.{k}.bias"), vec![d[1]]),
                input: d[0],
                output: d[1],
            })
            .collect();

        Self { specs, offsets, projection, lstm, mlp, hidden: h, total }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Range of tensor `i` within the flat buffer.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.specs[i].numel()
    }
}

/// All learned weights of one metric's regressor, as a flat buffer in
/// [`Layout`] order. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    data: Vec<f64>,
}

impl PredictorParams {
    pub fn zeros(layout: &Layout) -> Self {
        Self { data: vec![0.0; layout.len()] }
    }

    pub fn from_vec(layout: &Layout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(Self { data })
    }

    /// Uniform `[-1/sqrt(fan), 1/sqrt(fan)]` weights (fan = hidden for the
    /// recurrent layers, fan-in for dense layers) and forget-gate bias +1.
    pub fn init<R: Rng>(layout: &Layout, rng: &mut R) -> Self {
        let mut p = Self::zeros(layout);
        let h = layout.hidden;
        let mut fill = |data: &mut [f64], start: usize, len: usize, bound: f64| {
            for v in &mut data[start..start + len] {
                *v = rng.random_range(-bound..bound);
            }
        };
        let lstm_bound = 1.0 / (h as f64).sqrt();
        for layer in &layout.lstm {
            for s in layer {
                fill(&mut p.data, s.w_ih, 4 * h * s.input, lstm_bound);
                fill(&mut p.data, s.w_hh, 4 * h * h, lstm_bound);
                fill(&mut p.data, s.bias, 4 * h, lstm_bound);
                p.data[s.bias + h..s.bias + 2 * h].fill(1.0);
            }
        }
        for d in layout.projection.iter().chain(&layout.mlp) {
            let bound = 1.0 / (d.input as f64).sqrt();
            fill(&mut p.data, d.weight, d.input * d.output, bound);
            fill(&mut p.data, d.bias, d.output, bound);
        }
        p
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor<'a>(&'a self, layout: &Layout, name: &str) -> Option<&'a [f64]> {
        let i = layout.specs.iter().position(|s| s.name == name)?;
        Some(&self.data[layout.range(i)])
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Rounds every entry to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}
