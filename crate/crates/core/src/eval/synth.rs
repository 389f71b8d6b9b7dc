//! Synthetic prompts whose metric curves are a known function of the embedding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EmbeddingVector, MetricKind, MetricSample, MetricSeries, Orientation, Orientations, TimestepGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveFamily {
    /// `a + (b - a)(1 - exp(-t / tau))` in up-good orientation.
    SaturatingExp,
    /// `a` before an onset step, `b` from it on. The onset is the true plateau.
    StepOnset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_prompts: usize,
    pub embedding_dim: usize,
    pub t_n: u32,
    pub family: CurveFamily,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Onset range for `StepOnset`, inclusive.
    pub onset_min: u32,
    pub onset_max: u32,
    pub n_seeds: u32,
    pub noise_sd: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_prompts: 64,
            embedding_dim: 32,
            t_n: 129,
            family: CurveFamily::SaturatingExp,
            tau_min: 2.0,
            tau_max: 40.0,
            onset_min: 70,
            onset_max: 125,
            n_seeds: 4,
            noise_sd: 0.01,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prompts < 2 || self.embedding_dim == 0 || self.t_n < 1 || self.n_seeds == 0 {
            return Err(Error::Validation("synth needs at least 2 prompts and positive sizes".into()));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max && self.tau_max.is_finite()) {
            return Err(Error::Validation("need 0 < tau_min <= tau_max".into()));
        }
        if !(1 <= self.onset_min && self.onset_min <= self.onset_max && self.onset_max <= self.t_n) {
            return Err(Error::Validation("need 1 <= onset_min <= onset_max <= t_n".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Validation("noise_sd must be >= 0".into()));
        }
        Ok(())
    }
}

/// Ground-truth curve of one (prompt, metric) pair, in up-good orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub prompt_id: u64,
    pub metric: MetricKind,
    pub start: f64,
    pub end: f64,
    pub tau: f64,
    pub onset: u32,
}

impl CurveParams {
    pub fn up_good_at(&self, t: u32, family: CurveFamily) -> f64 {
        match family {
            CurveFamily::SaturatingExp => {
                self.start + (self.end - self.start) * (1.0 - (-(t as f64) / self.tau).exp())
            }
            CurveFamily::StepOnset => {
                if t >= self.onset {
                    self.end
                } else {
                    self.start
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub embeddings: Vec<(u64, EmbeddingVector)>,
    pub params: Vec<CurveParams>,
    /// Noise-free dense curves in each metric's natural orientation.
    pub truth: BTreeMap<(u64, MetricKind), MetricSeries>,
}

// (start range, end) per metric, up-good.
fn metric_levels(m: MetricKind) -> ((f64, f64), f64) {
    match m {
        MetricKind::Lsnr => ((0.05, 0.30), 0.85),
        MetricKind::Dsim => ((0.20, 0.50), 0.97),
        MetricKind::Iclip => ((0.40, 0.70), 0.95),
    }
}

fn unit_gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn squash(e: &[f64], dir: &[f64]) -> f64 {
    let z = (e.len() as f64).sqrt() * e.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>();
    1.0 / (1.0 + (-1.5 * z).exp())
}

/// Builds `n_prompts` random unit embeddings and, for every metric, a curve
/// whose shape parameters are smooth functions of two hidden projections of
/// the embedding.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let dirs: BTreeMap<MetricKind, (Vec<f64>, Vec<f64>)> = MetricKind::ALL
        .iter()
        .map(|&m| (m, (unit_gaussian(&mut rng, cfg.embedding_dim), unit_gaussian(&mut rng, cfg.embedding_dim))))
        .collect();
    let orient = Orientations::default();
    let steps: Vec<u32> = (1..=cfg.t_n).collect();

    let mut embeddings = Vec::with_capacity(cfg.n_prompts);
    let mut params = Vec::new();
    let mut truth = BTreeMap::new();
    for i in 0..cfg.n_prompts {
        let id = i as u64 + 1;
        let e = unit_gaussian(&mut rng, cfg.embedding_dim);
        for m in MetricKind::ALL {
            let (shape_dir, level_dir) = &dirs[&m];
            let s = squash(&e, shape_dir);
            let ((lo, hi), end) = metric_levels(m);
            let start = lo + (hi - lo) * squash(&e, level_dir);
            let tau = (cfg.tau_min.ln() + s * (cfg.tau_max.ln() - cfg.tau_min.ln())).exp();
            let span = (cfg.onset_max - cfg.onset_min) as f64;
            let onset = cfg.onset_min + (s * span).round() as u32;
            let p = CurveParams { prompt_id: id, metric: m, start, end, tau, onset };
            let values = steps
                .iter()
                .map(|&t| {
                    let v = p.up_good_at(t, cfg.family);
                    match orient.get(m) {
                        Orientation::UpGood => v,
                        Orientation::DownGood => 1.0 - v,
                    }
                })
                .collect();
            truth.insert((id, m), MetricSeries::new(id, m, steps.clone(), values)?);
            params.push(p);
        }
        embeddings.push((id, EmbeddingVector::new(e)?));
    }
    Ok(SynthDataset { config: cfg.clone(), embeddings, params, truth })
}

impl SynthDataset {
    /// Noisy per-seed samples on `grid`, clamped to `[0, 1]`. Seeded
    /// independently of the curves so the same truth can be resampled.
    pub fn samples(&self, grid: &TimestepGrid, noise_seed: u64) -> Result<Vec<MetricSample>> {
        if grid.reference_step() > self.config.t_n {
            return Err(Error::Validation(format!(
                "grid ends at {} beyond synthetic t_n {}",
                grid.reference_step(),
                self.config.t_n
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let noise = Normal::new(0.0, self.config.noise_sd).map_err(|e| Error::Validation(e.to_string()))?;
        let mut out = Vec::new();
        for ((id, m), series) in &self.truth {
            for seed in 0..self.config.n_seeds {
                for &t in grid.steps() {
                    let v = series.value_at(t).expect("dense truth");
                    let v = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    out.push(MetricSample::new(*id, seed, t, *m, v)?);
                }
            }
        }
        Ok(out)
    }

    pub fn curves_for(&self, prompt_id: u64) -> BTreeMap<MetricKind, MetricSeries> {
        MetricKind::ALL
            .iter()
            .filter_map(|&m| self.truth.get(&(prompt_id, m)).map(|s| (m, s.clone())))
            .collect()
    }
}
