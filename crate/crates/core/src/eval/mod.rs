//! Compute accounting and the OURS / UNIFORM / REFERENCE comparison.

mod synth;

pub use synth::{synth_dataset, CurveFamily, CurveParams, SynthConfig, SynthDataset};

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::budget::BudgetSuggestion;
use crate::error::{Error, Result};
use crate::stats;
use crate::types::{CostModel, MetricKind, MetricSeries, Orientation, Orientations};

/// Default REFERENCE step.
pub const REFERENCE_STEP: u32 = 65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Condition {
    Ours,
    Uniform,
    Reference,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Ours, Condition::Uniform, Condition::Reference];
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Ours => "OURS",
            Condition::Uniform => "UNIFORM",
            Condition::Reference => "REFERENCE",
        })
    }
}

/// TFLOPs for one generation with `t` denoising steps.
pub fn cost(t: u32, model: &CostModel) -> Result<f64> {
    if t < 1 {
        return Err(Error::Validation("step count must be >= 1".into()));
    }
    Ok(model.fixed_overhead_tflops + t as f64 * model.tflops_per_step)
}

/// Quality per TFLOP. Down-good metrics must be inverted by the caller.
pub fn efficiency(quality: f64, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::Validation(format!("compute cost must be positive, got {eta}")));
    }
    Ok(quality / eta)
}

/// `ours / uniform - 1`, or `None` when the UNIFORM value is zero.
pub fn relative_quality(ours: f64, uniform: f64) -> Option<f64> {
    if uniform == 0.0 {
        None
    } else {
        Some(ours / uniform - 1.0)
    }
}

/// The single UNIFORM step: mean suggested `t_star`, rounded half to even.
pub fn uniform_baseline(suggestions: &[BudgetSuggestion]) -> Result<u32> {
    if suggestions.is_empty() {
        return Err(Error::Validation("no suggestions to average".into()));
    }
    let steps: Vec<f64> = suggestions.iter().map(|s| s.t_star as f64).collect();
    Ok((stats::mean(&steps).round_ties_even() as u32).max(1))
}

/// Mean absolute error between two curves on the same steps.
pub fn mae(pred: &MetricSeries, truth: &MetricSeries) -> Result<f64> {
    if pred.steps() != truth.steps() {
        return Err(Error::Shape(format!(
            "series grids differ ({} vs {} steps)",
            pred.len(),
            truth.len()
        )));
    }
    let diffs: Vec<f64> = pred.values().iter().zip(truth.values()).map(|(a, b)| (a - b).abs()).collect();
    Ok(stats::mean(&diffs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        Self { mean: stats::mean(xs), std_error: stats::std_error(xs), n: xs.len() }
    }
}

/// Where per-step quality values came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualitySource {
    GroundTruth,
    Predicted,
}

/// One evaluated prompt: its suggestion and the dense curves used to score
/// the chosen steps.
#[derive(Debug, Clone)]
pub struct EvalPrompt {
    pub suggestion: BudgetSuggestion,
    pub quality: BTreeMap<MetricKind, MetricSeries>,
    pub source: QualitySource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub cost: CostModel,
    pub reference_step: u32,
    pub orientations: Orientations,
    /// Measured wall-clock seconds per denoising step, if available.
    pub seconds_per_step: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cost: CostModel::default(),
            reference_step: REFERENCE_STEP,
            orientations: Orientations::default(),
            seconds_per_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub mean_steps: f64,
    pub mean_eta_tflops: f64,
    pub seconds_per_image: Option<f64>,
    /// Up-good quality at the chosen step.
    pub quality: BTreeMap<MetricKind, MeanSe>,
    /// Up-good quality divided by TFLOPs, per prompt.
    pub efficiency: BTreeMap<MetricKind, MeanSe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub n_prompts: usize,
    pub uniform_step: u32,
    pub reference_step: u32,
    pub quality_source: BTreeMap<String, usize>,
    pub conditions: BTreeMap<Condition, ConditionReport>,
    /// OURS relative to UNIFORM on up-good values.
    pub relative_quality: BTreeMap<MetricKind, MeanSe>,
    /// Prompts skipped per metric because the UNIFORM value was zero.
    pub relative_quality_skipped: BTreeMap<MetricKind, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction_mae: Option<BTreeMap<MetricKind, MeanSe>>,
    pub rows: Vec<PromptRow>,
}

/// Per-prompt, per-condition values behind the report's aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub prompt_id: u64,
    pub condition: Condition,
    pub steps: u32,
    pub eta_tflops: f64,
    pub quality: BTreeMap<MetricKind, f64>,
    pub efficiency: BTreeMap<MetricKind, f64>,
    pub source: QualitySource,
}

fn up_good(v: f64, o: Orientation) -> f64 {
    match o {
        Orientation::UpGood => v,
        Orientation::DownGood => 1.0 - v,
    }
}

/// Scores every prompt under OURS (its own `t_star`), UNIFORM (the rounded
/// mean `t_star`) and REFERENCE (a fixed step), then aggregates.
pub fn build_report(prompts: &[EvalPrompt], cfg: &EvalConfig) -> Result<EfficiencyReport> {
    if prompts.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let suggestions: Vec<BudgetSuggestion> = prompts.iter().map(|p| p.suggestion.clone()).collect();
    let uniform_step = uniform_baseline(&suggestions)?;

    let mut rows = Vec::with_capacity(3 * prompts.len());
    let mut rel: BTreeMap<MetricKind, Vec<f64>> = BTreeMap::new();
    let mut skipped: BTreeMap<MetricKind, usize> = MetricKind::ALL.iter().map(|&m| (m, 0)).collect();
    let mut sources: BTreeMap<String, usize> = BTreeMap::new();

    for p in prompts {
        let id = p.suggestion.prompt_id;
        let key = serde_json::to_value(p.source)?.as_str().unwrap_or_default().to_string();
        *sources.entry(key).or_default() += 1;
        let mut at_step: BTreeMap<Condition, BTreeMap<MetricKind, f64>> = BTreeMap::new();
        for cond in Condition::ALL {
            let t = match cond {
                Condition::Ours => p.suggestion.t_star,
                Condition::Uniform => uniform_step,
                Condition::Reference => cfg.reference_step,
            };
            let eta = cost(t, &cfg.cost)?;
            let mut quality = BTreeMap::new();
            let mut eff = BTreeMap::new();
            for m in MetricKind::ALL {
                let s = p
                    .quality
                    .get(&m)
                    .ok_or_else(|| Error::Validation(format!("prompt {id}: missing {m} curve")))?;
                let v = s.value_at(t).ok_or_else(|| {
                    Error::Validation(format!("prompt {id}: {m} curve has no value at step {t}"))
                })?;
                let q = up_good(v, cfg.orientations.get(m));
                quality.insert(m, q);
                eff.insert(m, efficiency(q, eta)?);
            }
            at_step.insert(cond, quality.clone());
            rows.push(PromptRow { prompt_id: id, condition: cond, steps: t, eta_tflops: eta, quality, efficiency: eff, source: p.source });
        }
        for m in MetricKind::ALL {
            let ours = at_step[&Condition::Ours][&m];
            let uni = at_step[&Condition::Uniform][&m];
            match relative_quality(ours, uni) {
                Some(r) => rel.entry(m).or_default().push(r),
                None => {
                    log::warn!("prompt {id}: UNIFORM {m} is zero, skipped in relative quality");
                    *skipped.get_mut(&m).unwrap() += 1;
                }
            }
        }
    }

    let mut conditions = BTreeMap::new();
    for cond in Condition::ALL {
        let sel: Vec<&PromptRow> = rows.iter().filter(|r| r.condition == cond).collect();
        let steps: Vec<f64> = sel.iter().map(|r| r.steps as f64).collect();
        let etas: Vec<f64> = sel.iter().map(|r| r.eta_tflops).collect();
        let mean_steps = stats::mean(&steps);
        let collect = |f: &dyn Fn(&PromptRow) -> f64| -> MeanSe {
            MeanSe::of(&sel.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        conditions.insert(
            cond,
            ConditionReport {
                mean_steps,
                mean_eta_tflops: stats::mean(&etas),
                seconds_per_image: cfg.seconds_per_step.map(|s| s * mean_steps),
                quality: MetricKind::ALL.iter().map(|&m| (m, collect(&|r| r.quality[&m]))).collect(),
                efficiency: MetricKind::ALL.iter().map(|&m| (m, collect(&|r| r.efficiency[&m]))).collect(),
            },
        );
    }

    Ok(EfficiencyReport {
        n_prompts: prompts.len(),
        uniform_step,
        reference_step: cfg.reference_step,
        quality_source: sources,
        conditions,
        relative_quality: rel.into_iter().map(|(m, v)| (m, MeanSe::of(&v))).collect(),
        relative_quality_skipped: skipped,
        prediction_mae: None,
        rows,
    })
}

/// Mean per-prompt MAE for each metric over matching (prompt, metric) pairs.
pub fn prediction_mae(
    predicted: &BTreeMap<(u64, MetricKind), MetricSeries>,
    truth: &BTreeMap<(u64, MetricKind), MetricSeries>,
) -> Result<BTreeMap<MetricKind, MeanSe>> {
    let mut per: BTreeMap<MetricKind, Vec<f64>> = BTreeMap::new();
    for (key, p) in predicted {
        let t = truth
            .get(key)
            .ok_or_else(|| Error::Validation(format!("no ground truth for prompt {} {}", key.0, key.1)))?;
        per.entry(key.1).or_default().push(mae(p, t)?);
    }
    Ok(per.into_iter().map(|(m, v)| (m, MeanSe::of(&v))).collect())
}

/// Plot-ready per-prompt rows: `prompt_id,condition,steps,eta_tflops,metric,quality,efficiency`.
pub fn write_efficiency_csv<W: Write>(mut w: W, report: &EfficiencyReport) -> Result<()> {
    writeln!(w, "prompt_id,condition,steps,eta_tflops,metric,quality,efficiency")?;
    for r in &report.rows {
        for m in MetricKind::ALL {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.prompt_id, r.condition, r.steps, r.eta_tflops, m, r.quality[&m], r.efficiency[&m]
            )?;
        }
    }
    Ok(())
}

/// `prompt_id,metric,relative_quality` for OURS against UNIFORM.
pub fn write_relative_quality_csv<W: Write>(mut w: W, report: &EfficiencyReport) -> Result<()> {
    writeln!(w, "prompt_id,metric,relative_quality")?;
    let mut by_prompt: BTreeMap<u64, (Option<&PromptRow>, Option<&PromptRow>)> = BTreeMap::new();
    for r in &report.rows {
        let e = by_prompt.entry(r.prompt_id).or_default();
        match r.condition {
            Condition::Ours => e.0 = Some(r),
            Condition::Uniform => e.1 = Some(r),
            Condition::Reference => {}
        }
    }
    for (id, (ours, uni)) in by_prompt {
        let (Some(o), Some(u)) = (ours, uni) else { continue };
        for m in MetricKind::ALL {
            if let Some(rq) = relative_quality(o.quality[&m], u.quality[&m]) {
                writeln!(w, "{id},{m},{rq}")?;
            }
        }
    }
    Ok(())
}
