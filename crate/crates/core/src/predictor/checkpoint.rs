//! Checkpoints are a JSON manifest plus a sibling `.bfck` blob:
//! `"BFCK" | version u32 | tensor count u32 | value count u64 | values f32 LE`,
//! tensors concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::params::{Layout, PredictorParams, TensorSpec};
use super::train::EpochStats;
use super::ModelConfig;
use crate::dataset::densify_series;
use crate::error::{Error, Result};
use crate::types::{EmbeddingVector, MetricKind, MetricSeries, TimestepGrid};

pub const BFCK_MAGIC: &[u8; 4] = b"BFCK";
const BFCK_VERSION: u32 = 1;
const MANIFEST_FORMAT: &str = "budgetfusion-checkpoint";
const BLOB_HEADER_LEN: usize = 20;

/// Trained parameters of one metric's model and the context needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorCheckpoint {
    pub config: ModelConfig,
    pub metric: MetricKind,
    /// Sampled grid of the training data; its last step bounds every prediction.
    pub grid: TimestepGrid,
    pub training_seed: u64,
    pub loss_trace: Vec<EpochStats>,
    pub params: PredictorParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    metric: MetricKind,
    config: ModelConfig,
    grid: TimestepGrid,
    training_seed: u64,
    loss_trace: Vec<EpochStats>,
    tensors: Vec<TensorSpec>,
    blob: String,
}

impl PredictorCheckpoint {
    /// All-zero parameters: every prediction is exactly 0.5.
    pub fn zeros(config: ModelConfig, metric: MetricKind, grid: TimestepGrid) -> Result<Self> {
        config.validate()?;
        let params = PredictorParams::zeros(&Layout::new(&config));
        Ok(Self { training_seed: config.rng_seed, config, metric, grid, loss_trace: Vec::new(), params })
    }

    pub fn t_n(&self) -> u32 {
        self.grid.reference_step()
    }

    /// Refuses a grid whose reference step differs from the training grid's.
    pub fn check_grid(&self, grid: &TimestepGrid) -> Result<()> {
        if grid.reference_step() != self.t_n() {
            return Err(Error::Shape(format!(
                "{} checkpoint was trained up to step {}, requested grid ends at {}",
                self.metric,
                self.t_n(),
                grid.reference_step()
            )));
        }
        Ok(())
    }
}

pub fn encode_blob(params: &PredictorParams, n_tensors: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(BLOB_HEADER_LEN + 4 * params.len());
    out.extend_from_slice(BFCK_MAGIC);
    out.extend_from_slice(&BFCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(n_tensors as u32).to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &v in params.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode_blob(bytes: &[u8], layout: &Layout) -> Result<PredictorParams> {
    if bytes.len() < BLOB_HEADER_LEN || &bytes[0..4] != BFCK_MAGIC {
        return Err(Error::Format("not a BFCK blob".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BFCK_VERSION {
        return Err(Error::Format(format!("unsupported BFCK version {version}")));
    }
    let n_tensors = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n_values = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if n_tensors != layout.specs().len() || n_values != layout.len() {
        return Err(Error::Shape(format!(
            "blob holds {n_tensors} tensors / {n_values} values, manifest declares {} / {}",
            layout.specs().len(),
            layout.len()
        )));
    }
    if bytes.len() != BLOB_HEADER_LEN + 4 * n_values {
        return Err(Error::Format(format!(
            "blob is {} bytes, expected {}",
            bytes.len(),
            BLOB_HEADER_LEN + 4 * n_values
        )));
    }
    let values = bytes[BLOB_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    PredictorParams::from_vec(layout, values)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bfck")
}

/// Writes `manifest_path` (JSON) and the blob next to it with extension `.bfck`.
pub fn save_checkpoint(ckpt: &PredictorCheckpoint, manifest_path: &Path) -> Result<()> {
    let layout = Layout::new(&ckpt.config);
    if ckpt.params.len() != layout.len() {
        return Err(Error::Shape("parameters do not match config".into()));
    }
    let blob = blob_path(manifest_path);
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: BFCK_VERSION,
        metric: ckpt.metric,
        config: ckpt.config.clone(),
        grid: ckpt.grid.clone(),
        training_seed: ckpt.training_seed,
        loss_trace: ckpt.loss_trace.clone(),
        tensors: layout.specs().to_vec(),
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Validation("checkpoint path has no file name".into()))?
            .to_string(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&blob, encode_blob(&ckpt.params, layout.specs().len()))?;
    fs::write(manifest_path, json)?;
    Ok(())
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<PredictorCheckpoint> {
    let manifest: Manifest = serde_json::from_slice(&read_file(manifest_path)?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    if manifest.version != BFCK_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", manifest.version)));
    }
    manifest.config.validate()?;
    let layout = Layout::new(&manifest.config);
    if manifest.tensors != layout.specs() {
        let first_bad = manifest
            .tensors
            .iter()
            .zip(layout.specs())
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{} {:?} vs expected {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| "tensor count differs".into());
        return Err(Error::Shape(format!("manifest tensors do not match config: {first_bad}")));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let params = decode_blob(&read_file(&dir.join(&manifest.blob))?, &layout)?;
    Ok(PredictorCheckpoint {
        config: manifest.config,
        metric: manifest.metric,
        grid: manifest.grid,
        training_seed: manifest.training_seed,
        loss_trace: manifest.loss_trace,
        params,
    })
}

/// Dense predicted curve over `1..=t_N`. With a step stride above 1 the
/// strided predictions are linearly interpolated.
pub fn predict_series(
    ckpt: &PredictorCheckpoint,
    prompt_id: u64,
    prompt_embedding: &EmbeddingVector,
    metric: MetricKind,
) -> Result<MetricSeries> {
    if metric != ckpt.metric {
        return Err(Error::Validation(format!(
            "checkpoint predicts {}, requested {metric}",
            ckpt.metric
        )));
    }
    let layout = Layout::new(&ckpt.config);
    let net = Network::new(&ckpt.config, &layout, &ckpt.params)?;
    let steps = ckpt.config.sequence_steps(ckpt.t_n());
    let out = net.forward_seq(prompt_embedding.values(), &steps, None)?.out;
    let series = MetricSeries::new(prompt_id, metric, steps, out)?;
    if series.is_dense() {
        Ok(series)
    } else {
        densify_series(&series)
    }
}
