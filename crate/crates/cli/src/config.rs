use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use budgetfusion::budget::PlateauConfig;
use budgetfusion::dataset::{DedupConfig, GridSpec};
use budgetfusion::eval::{EvalConfig, SynthConfig};
use budgetfusion::imagemetrics::LsnrConfig;
use budgetfusion::predictor::ModelConfig;
use budgetfusion::types::MetricKind;
use budgetfusion::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub prompts: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub outputs: Option<PathBuf>,
    pub extractor: Option<PathBuf>,
    pub run_log: Option<PathBuf>,
}

/// Everything a run needs besides its inputs. Flags override fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub grid: GridSpec,
    pub dedup: DedupConfig,
    pub lsnr: LsnrConfig,
    pub split_fraction: f64,
    /// Shared model settings; `models` entries replace them per metric.
    pub model: ModelConfig,
    pub models: BTreeMap<MetricKind, ModelConfig>,
    pub plateau: PlateauConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub rng_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            grid: GridSpec::default(),
            dedup: DedupConfig::default(),
            lsnr: LsnrConfig::default(),
            split_fraction: 0.9,
            model: ModelConfig::default(),
            models: BTreeMap::new(),
            plateau: PlateauConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
            rng_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let bytes = fs::read(p)?;
                serde_json::from_slice(&bytes).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn model_for(&self, metric: MetricKind) -> ModelConfig {
        self.models.get(&metric).cloned().unwrap_or_else(|| self.model.clone())
    }

    /// Hex SHA-256 of the effective configuration's JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
