//! On-disk formats: BFEM embeddings, `metrics.csv`, `series.csv`,
//! `prompts.jsonl` and `split.json`.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EmbeddingVector, MetricKind, MetricSample, MetricSeries, Prompt};

pub const BFEM_MAGIC: &[u8; 4] = b"BFEM";
pub const BFEM_VERSION: u32 = 1;
pub const BFEM_HEADER_LEN: usize = 16;

pub const METRICS_HEADER: [&str; 5] = ["prompt_id", "seed", "timestep", "metric", "value"];
pub const SERIES_HEADER: [&str; 4] = ["prompt_id", "metric", "timestep", "value"];

/// Writes embeddings in BFEM layout (little-endian):
/// `"BFEM" | version u32 | count u32 | dim u32 | count * (id u64 | dim * f32)`.
pub fn write_bfem<W: Write>(mut w: W, dim: usize, records: &[(u64, EmbeddingVector)]) -> Result<()> {
    if dim == 0 {
        return Err(Error::Format("BFEM dim must be positive".into()));
    }
    let count = u32::try_from(records.len())
        .map_err(|_| Error::Format("too many records for BFEM".into()))?;
    let dim32 = u32::try_from(dim).map_err(|_| Error::Format("dim too large".into()))?;

    let mut payload = Vec::with_capacity(records.len() * (8 + 4 * dim));
    for (id, v) in records {
        if v.dim() != dim {
            return Err(Error::Format(format!(
                "record {id} has dim {} but stream dim is {dim}",
                v.dim()
            )));
        }
        payload.extend_from_slice(&id.to_le_bytes());
        for &x in v.values() {
            let f = x as f32;
            if !f.is_finite() {
                return Err(Error::Validation(format!(
                    "record {id} has a value not representable as f32 ({x})"
                )));
            }
            payload.extend_from_slice(&f.to_le_bytes());
        }
    }

    w.write_all(BFEM_MAGIC)?;
    w.write_all(&BFEM_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&dim32.to_le_bytes())?;
    w.write_all(&payload)?;
    Ok(())
}

/// Decoded BFEM stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub records: Vec<(u64, EmbeddingVector)>,
}

impl EmbeddingTable {
    pub fn get(&self, id: u64) -> Option<&EmbeddingVector> {
        self.records.iter().find(|(i, _)| *i == id).map(|(_, v)| v)
    }

    pub fn to_map(&self) -> BTreeMap<u64, EmbeddingVector> {
        self.records.iter().cloned().collect()
    }
}

pub fn read_bfem<R: Read>(mut r: R) -> Result<EmbeddingTable> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_bfem(&bytes)
}

pub fn decode_bfem(bytes: &[u8]) -> Result<EmbeddingTable> {
    if bytes.len() < BFEM_HEADER_LEN {
        return Err(Error::Format(format!(
            "BFEM stream too short for header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[0..4] != BFEM_MAGIC {
        return Err(Error::Format("bad BFEM magic".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != BFEM_VERSION {
        return Err(Error::Format(format!("unsupported BFEM version {version}")));
    }
    let count = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    if dim == 0 {
        return Err(Error::Format("BFEM dim is zero".into()));
    }
    let record_len = 8 + 4 * dim;
    let expected = BFEM_HEADER_LEN + count * record_len;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "BFEM stream is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }

    let mut records = Vec::with_capacity(count);
    let mut seen = HashSet::with_capacity(count);
    for rec in bytes[BFEM_HEADER_LEN..].chunks_exact(record_len) {
        let id = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        if !seen.insert(id) {
            return Err(Error::Format(format!("duplicate embedding id {id}")));
        }
        let values = rec[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        records.push((id, EmbeddingVector::new(values)?));
    }
    Ok(EmbeddingTable { dim, records })
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = found.iter().map(str::trim).collect();
    if found != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {:?}, found {:?}", expected.join(","), found.join(",")),
        });
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<T> {
    let raw = rec.get(idx).ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing field {name}"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {name} {raw:?}"),
    })
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(r)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, msg: format!("{other:?}") },
    }
}

/// Parses `metrics.csv`. Values outside `[0, 1]` are rejected with their line number.
pub fn parse_metric_table<R: Read>(r: R) -> Result<Vec<MetricSample>> {
    let mut rdr = csv_reader(r);
    check_header(rdr.headers().map_err(csv_error)?, &METRICS_HEADER)?;

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != METRICS_HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected 5 fields, found {}", rec.len()),
            });
        }
        let prompt_id = field(&rec, 0, "prompt_id", line)?;
        let seed = field(&rec, 1, "seed", line)?;
        let timestep: u32 = field(&rec, 2, "timestep", line)?;
        let metric = rec[3].trim().parse::<MetricKind>().map_err(|_| Error::Parse {
            line,
            msg: format!("unknown metric {:?}", &rec[3]),
        })?;
        let value: f64 = field(&rec, 4, "value", line)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Range { line, value });
        }
        if timestep < 1 {
            return Err(Error::Parse { line, msg: "timestep must be >= 1".into() });
        }
        out.push(MetricSample { prompt_id, seed, timestep, metric, value });
    }
    Ok(out)
}

pub fn emit_metric_table<W: Write>(w: W, samples: &[MetricSample]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(METRICS_HEADER).map_err(csv_error)?;
    for s in samples {
        wtr.write_record([
            s.prompt_id.to_string(),
            s.seed.to_string(),
            s.timestep.to_string(),
            s.metric.name().to_string(),
            s.value.to_string(),
        ])
        .map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes series as `prompt_id,metric,timestep,value` rows, one per step.
pub fn emit_series_table<W: Write>(w: W, series: &[MetricSeries]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SERIES_HEADER).map_err(csv_error)?;
    for s in series {
        for (&t, &v) in s.steps().iter().zip(s.values()) {
            wtr.write_record([
                s.prompt_id.to_string(),
                s.metric.name().to_string(),
                t.to_string(),
                v.to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads `series.csv`; rows of one (prompt, metric) may appear in any order.
pub fn parse_series_table<R: Read>(r: R) -> Result<Vec<MetricSeries>> {
    let mut rdr = csv_reader(r);
    check_header(rdr.headers().map_err(csv_error)?, &SERIES_HEADER)?;

    let mut groups: BTreeMap<(u64, MetricKind), BTreeMap<u32, f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != SERIES_HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let prompt_id = field(&rec, 0, "prompt_id", line)?;
        let metric = rec[1].trim().parse::<MetricKind>().map_err(|_| Error::Parse {
            line,
            msg: format!("unknown metric {:?}", &rec[1]),
        })?;
        let timestep: u32 = field(&rec, 2, "timestep", line)?;
        let value: f64 = field(&rec, 3, "value", line)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Range { line, value });
        }
        if groups
            .entry((prompt_id, metric))
            .or_default()
            .insert(timestep, value)
            .is_some()
        {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate row for prompt {prompt_id} {metric} t={timestep}"),
            });
        }
    }
    groups
        .into_iter()
        .map(|((id, metric), cells)| {
            let (steps, values) = cells.into_iter().unzip();
            MetricSeries::new(id, metric, steps, values)
        })
        .collect()
}

pub fn read_prompts<R: BufRead>(r: R) -> Result<Vec<Prompt>> {
    let mut out: Vec<Prompt> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prompt = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let p = Prompt::new(p.id, p.text).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(p.id) {
            return Err(Error::Parse { line: i + 1, msg: format!("duplicate prompt id {}", p.id) });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_prompts<W: Write>(mut w: W, prompts: &[Prompt]) -> Result<()> {
    for p in prompts {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Contents of `split.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub eval: Vec<u64>,
}
