//! Plateau detection: the suggested step count for a prompt is the latest of
//! the per-metric plateau points.
//!
//! For one metric, with the curve oriented so that larger is better, the
//! threshold is `median + weight * std` over the whole curve and the plateau
//! point is the earliest step whose value reaches it. When no step qualifies
//! the reference step `t_N` is used.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::types::{MetricKind, MetricSeries, Orientation, Orientations};

/// Per-metric weights on the standard deviation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    #[serde(rename = "LSNR")]
    pub lsnr: f64,
    #[serde(rename = "DSIM")]
    pub dsim: f64,
    #[serde(rename = "ICLIP")]
    pub iclip: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        Self { lsnr: 0.3, dsim: 0.2, iclip: 0.5 }
    }
}

impl MetricWeights {
    pub fn get(&self, metric: MetricKind) -> f64 {
        match metric {
            MetricKind::Lsnr => self.lsnr,
            MetricKind::Dsim => self.dsim,
            MetricKind::Iclip => self.iclip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub weights: MetricWeights,
    /// `n` divisor for the standard deviation; `n - 1` when false.
    pub use_population_std: bool,
    pub orientations: Orientations,
    /// Evaluate the rule only at these steps (e.g. the sampled grid) instead
    /// of on every step of the dense curve.
    pub sparse_steps: Option<Vec<u32>>,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            weights: MetricWeights::default(),
            use_population_std: true,
            orientations: Orientations::default(),
            sparse_steps: None,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        for m in MetricKind::ALL {
            let w = self.weights.get(m);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Validation(format!("weight for {m} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Plateau step and the threshold that selected it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauPoint {
    #[serde(rename = "t")]
    pub step: u32,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSuggestion {
    pub prompt_id: u64,
    pub t_star: u32,
    pub per_metric: BTreeMap<MetricKind, PlateauPoint>,
}

/// Orients values so that larger is better: `DownGood` curves map `v -> 1 - v`.
pub fn canonicalize(values: &[f64], orientation: Orientation) -> Vec<f64> {
    match orientation {
        Orientation::UpGood => values.to_vec(),
        Orientation::DownGood => values.iter().map(|v| 1.0 - v).collect(),
    }
}

pub fn canonical_series(series: &MetricSeries, orientations: &Orientations) -> Vec<f64> {
    canonicalize(series.values(), orientations.get(series.metric))
}

pub fn plateau_point(steps: &[u32], canonical: &[f64], weight: f64, population_std: bool) -> Result<PlateauPoint> {
    if steps.is_empty() || steps.len() != canonical.len() {
        return Err(Error::Shape(format!(
            "plateau needs matching nonempty steps/values, got {} and {}",
            steps.len(),
            canonical.len()
        )));
    }
    let threshold = stats::median(canonical) + weight * stats::std_dev(canonical, population_std);
    let step = steps
        .iter()
        .zip(canonical)
        .find(|(_, &v)| v >= threshold)
        .map(|(&t, _)| t)
        .unwrap_or(*steps.last().unwrap());
    Ok(PlateauPoint { step, threshold })
}

/// Runs the plateau rule on each metric's curve and takes the latest step.
pub fn suggest(prompt_id: u64, series: &BTreeMap<MetricKind, MetricSeries>, cfg: &PlateauConfig) -> Result<BudgetSuggestion> {
    cfg.validate()?;
    let mut per_metric = BTreeMap::new();
    for m in MetricKind::ALL {
        let s = series
            .get(&m)
            .ok_or_else(|| Error::Validation(format!("prompt {prompt_id}: missing {m} series")))?;
        if s.metric != m {
            return Err(Error::Validation(format!("series under key {m} is {}", s.metric)));
        }
        let canonical = canonical_series(s, &cfg.orientations);
        let point = match &cfg.sparse_steps {
            None => {
                if !s.is_dense() {
                    return Err(Error::Validation(format!("prompt {prompt_id}: {m} series is not dense")));
                }
                plateau_point(s.steps(), &canonical, cfg.weights.get(m), cfg.use_population_std)?
            }
            Some(steps) => {
                let mut kept_steps = Vec::with_capacity(steps.len());
                let mut kept = Vec::with_capacity(steps.len());
                for &t in steps {
                    let i = s.steps().binary_search(&t).map_err(|_| {
                        Error::Validation(format!("prompt {prompt_id}: {m} series has no step {t}"))
                    })?;
                    kept_steps.push(t);
                    kept.push(canonical[i]);
                }
                plateau_point(&kept_steps, &kept, cfg.weights.get(m), cfg.use_population_std)?
            }
        };
        per_metric.insert(m, point);
    }
    let t_star = per_metric.values().map(|p| p.step).max().expect("three metrics");
    Ok(BudgetSuggestion { prompt_id, t_star, per_metric })
}
