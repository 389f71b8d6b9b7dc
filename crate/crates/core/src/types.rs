//! Shared domain types.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub text: String,
}

impl Prompt {
    pub fn new(id: u64, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Validation(format!("prompt {id} has empty text")));
        }
        Ok(Self { id, text })
    }
}

/// Fixed-width real vector: a prompt embedding or a positional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("embedding must have positive dim".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "embedding entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Sorted set of sampled denoising steps. The last step is the reference step `t_N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TimestepGrid {
    steps: Vec<u32>,
}

impl TimestepGrid {
    pub fn new(steps: Vec<u32>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Validation("timestep grid is empty".into()));
        }
        if steps[0] < 1 {
            return Err(Error::Validation("timesteps must be >= 1".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(
                "timestep grid must be strictly increasing".into(),
            ));
        }
        Ok(Self { steps })
    }

    /// The dense grid `1..=t_n`.
    pub fn dense(t_n: u32) -> Result<Self> {
        Self::new((1..=t_n).collect())
    }

    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn reference_step(&self) -> u32 {
        *self.steps.last().expect("grid is nonempty")
    }

    pub fn contains(&self, t: u32) -> bool {
        self.steps.binary_search(&t).is_ok()
    }
}

impl TryFrom<Vec<u32>> for TimestepGrid {
    type Error = Error;

    fn try_from(steps: Vec<u32>) -> Result<Self> {
        Self::new(steps)
    }
}

impl From<TimestepGrid> for Vec<u32> {
    fn from(grid: TimestepGrid) -> Self {
        grid.steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "LSNR")]
    Lsnr,
    #[serde(rename = "DSIM")]
    Dsim,
    #[serde(rename = "ICLIP")]
    Iclip,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Lsnr, MetricKind::Dsim, MetricKind::Iclip];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Lsnr => "LSNR",
            MetricKind::Dsim => "DSIM",
            MetricKind::Iclip => "ICLIP",
        }
    }

    pub fn default_orientation(self) -> Orientation {
        match self {
            MetricKind::Lsnr | MetricKind::Iclip => Orientation::UpGood,
            MetricKind::Dsim => Orientation::DownGood,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LSNR" => Ok(MetricKind::Lsnr),
            "DSIM" => Ok(MetricKind::Dsim),
            "ICLIP" => Ok(MetricKind::Iclip),
            other => Err(Error::Validation(format!("unknown metric {other:?}"))),
        }
    }
}

/// Whether larger metric values mean better images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    UpGood,
    DownGood,
}

/// Per-metric orientation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orientations {
    #[serde(rename = "LSNR")]
    pub lsnr: Orientation,
    #[serde(rename = "DSIM")]
    pub dsim: Orientation,
    #[serde(rename = "ICLIP")]
    pub iclip: Orientation,
}

impl Default for Orientations {
    fn default() -> Self {
        Self {
            lsnr: MetricKind::Lsnr.default_orientation(),
            dsim: MetricKind::Dsim.default_orientation(),
            iclip: MetricKind::Iclip.default_orientation(),
        }
    }
}

impl Orientations {
    pub fn get(&self, metric: MetricKind) -> Orientation {
        match metric {
            MetricKind::Lsnr => self.lsnr,
            MetricKind::Dsim => self.dsim,
            MetricKind::Iclip => self.iclip,
        }
    }
}

/// One raw score for a (prompt, seed, timestep, metric) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSample {
    pub prompt_id: u64,
    pub seed: u32,
    pub timestep: u32,
    pub metric: MetricKind,
    pub value: f64,
}

impl MetricSample {
    pub fn new(prompt_id: u64, seed: u32, timestep: u32, metric: MetricKind, value: f64) -> Result<Self> {
        if timestep < 1 {
            return Err(Error::Validation("timestep must be >= 1".into()));
        }
        check_unit(value)?;
        Ok(Self { prompt_id, seed, timestep, metric, value })
    }
}

pub(crate) fn check_unit(value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::Validation(format!("metric value {value} outside [0, 1]")))
    }
}

/// A per-prompt metric curve `m_t(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub prompt_id: u64,
    pub metric: MetricKind,
    steps: Vec<u32>,
    values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(prompt_id: u64, metric: MetricKind, steps: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if steps.len() != values.len() {
            return Err(Error::Shape(format!(
                "series has {} steps but {} values",
                steps.len(),
                values.len()
            )));
        }
        if steps.is_empty() {
            return Err(Error::Validation("series is empty".into()));
        }
        if steps[0] < 1 || steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(
                "series steps must be strictly increasing and >= 1".into(),
            ));
        }
        for &v in &values {
            check_unit(v)?;
        }
        Ok(Self { prompt_id, metric, steps, values })
    }

    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last_step(&self) -> u32 {
        *self.steps.last().expect("series is nonempty")
    }

    /// True when the steps are exactly `1..=t_N`.
    pub fn is_dense(&self) -> bool {
        self.steps.iter().enumerate().all(|(i, &s)| s as usize == i + 1)
    }

    /// Value at step `t`, if `t` is one of the series' steps.
    pub fn value_at(&self, t: u32) -> Option<f64> {
        self.steps.binary_search(&t).ok().map(|i| self.values[i])
    }
}

/// Affine compute model: `eta = overhead + t * tflops_per_step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub tflops_per_step: f64,
    pub fixed_overhead_tflops: f64,
}

impl CostModel {
    /// TFLOPs per step implied by ~394 TFLOPs at 65 steps.
    pub const CALIBRATED_TFLOPS_PER_STEP: f64 = 6.0615;

    pub fn new(tflops_per_step: f64, fixed_overhead_tflops: f64) -> Result<Self> {
        if !(tflops_per_step > 0.0 && tflops_per_step.is_finite()) {
            return Err(Error::Validation("tflops_per_step must be positive".into()));
        }
        if !(fixed_overhead_tflops >= 0.0 && fixed_overhead_tflops.is_finite()) {
            return Err(Error::Validation(
                "fixed_overhead_tflops must be nonnegative".into(),
            ));
        }
        Ok(Self { tflops_per_step, fixed_overhead_tflops })
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            tflops_per_step: Self::CALIBRATED_TFLOPS_PER_STEP,
            fixed_overhead_tflops: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_rejects_blank_text() {
        assert!(Prompt::new(1, "  \t").is_err());
        assert!(Prompt::new(1, "a dog").is_ok());
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
    }

    #[test]
    fn grid_invariants() {
        assert!(TimestepGrid::new(vec![1, 3, 2]).is_err());
        assert!(TimestepGrid::new(vec![1, 1]).is_err());
        assert!(TimestepGrid::new(vec![0, 1]).is_err());
        let g = TimestepGrid::new(vec![1, 2, 5]).unwrap();
        assert_eq!(g.reference_step(), 5);
        assert!(g.contains(2) && !g.contains(3));
    }

    #[test]
    fn metric_names_round_trip() {
        for m in MetricKind::ALL {
            assert_eq!(m.name().parse::<MetricKind>().unwrap(), m);
        }
        assert!("SSIM".parse::<MetricKind>().is_err());
    }

    #[test]
    fn default_orientations() {
        let o = Orientations::default();
        assert_eq!(o.get(MetricKind::Lsnr), Orientation::UpGood);
        assert_eq!(o.get(MetricKind::Dsim), Orientation::DownGood);
        assert_eq!(o.get(MetricKind::Iclip), Orientation::UpGood);
    }

    #[test]
    fn series_validation() {
        assert!(MetricSeries::new(1, MetricKind::Lsnr, vec![1, 2], vec![0.5]).is_err());
        assert!(MetricSeries::new(1, MetricKind::Lsnr, vec![1, 2], vec![0.5, 1.2]).is_err());
        let s = MetricSeries::new(1, MetricKind::Lsnr, vec![1, 2, 3], vec![0.1, 0.2, 0.3]).unwrap();
        assert!(s.is_dense());
        let s = MetricSeries::new(1, MetricKind::Lsnr, vec![1, 3], vec![0.1, 0.3]).unwrap();
        assert!(!s.is_dense());
        assert_eq!(s.value_at(3), Some(0.3));
    }

    #[test]
    fn cost_model_validation() {
        assert!(CostModel::new(0.0, 0.0).is_err());
        assert!(CostModel::new(1.0, -1.0).is_err());
    }
}
