use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use budgetfusion::budget::{suggest, BudgetSuggestion};
use budgetfusion::dataset::{aggregate_seeds, build_timestep_grid, dedup_prompts, densify_series, split_dataset};
use budgetfusion::eval::{
    build_report, prediction_mae, synth_dataset, write_efficiency_csv, write_relative_quality_csv, CurveFamily, EvalPrompt,
    QualitySource,
};
use budgetfusion::formats::{
    emit_metric_table, emit_series_table, parse_metric_table, parse_series_table, read_bfem, read_prompts, write_bfem,
    write_prompts, Split,
};
use budgetfusion::imagemetrics::{l_snr_db, l_snr_score, GrayImage};
use budgetfusion::predictor::{load_checkpoint, predict_series, save_checkpoint, train, PredictorCheckpoint, TrainingExample};
use budgetfusion::types::{EmbeddingVector, MetricKind, MetricSample, MetricSeries, Prompt, TimestepGrid};
use budgetfusion::{Error, Result};
use clap::{Args, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::extractor;

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the sampled timestep grid as a JSON array.
    Grid(GridArgs),
    /// Drop near-duplicate prompts by embedding similarity.
    Dedup(DedupArgs),
    /// Score images with the Laplacian-style sharpness metric.
    Lsnr(LsnrArgs),
    /// Aggregate metric samples into dense per-prompt series and a split.
    Dataset(DatasetArgs),
    /// Train one predictor per metric.
    Train(TrainArgs),
    /// Predict dense metric curves for prompts.
    Predict(PredictArgs),
    /// Suggest a step budget per prompt (JSON lines).
    Suggest(SuggestArgs),
    /// Compare OURS, UNIFORM and REFERENCE budgets.
    Eval(EvalArgs),
    /// Write a synthetic dataset with known curves.
    Synth(SynthArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Grid(_) => "grid",
            Command::Dedup(_) => "dedup",
            Command::Lsnr(_) => "lsnr",
            Command::Dataset(_) => "dataset",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Suggest(_) => "suggest",
            Command::Eval(_) => "eval",
            Command::Synth(_) => "synth",
        }
    }
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    max_i: Option<u32>,
    /// Comma-separated extra timesteps; empty clears them.
    #[arg(long, value_parser = parse_step_list)]
    extras: Option<StepList>,
    #[arg(long, conflicts_with = "no_include_one")]
    include_one: bool,
    #[arg(long)]
    no_include_one: bool,
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Also filter this prompts.jsonl; otherwise kept ids are printed one per line.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LsnrArgs {
    /// Image tree `<prompt_id>/<seed>/<t>.png`; emits metrics.csv rows.
    #[arg(long, conflicts_with = "files")]
    images: Option<PathBuf>,
    /// Individual images; emits `path,l_snr_db,score`.
    files: Vec<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    kernel_radius: Option<usize>,
    #[arg(long)]
    ceiling_db: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// metrics.csv files; may be repeated (e.g. one per metric source).
    #[arg(long)]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Drop near-duplicate prompts first (needs embeddings).
    #[arg(long)]
    dedup: bool,
    #[arg(long)]
    split_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `dataset` (series.csv, split.json, grid.json).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Train only this metric.
    #[arg(long)]
    metric: Option<MetricKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    step_stride: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    no_position: bool,
}

#[derive(Debug, Args)]
pub struct PromptInput {
    #[arg(long)]
    prompt_embedding: Option<PathBuf>,
    /// Raw prompt text, embedded through the extractor; ids are 1, 2, ...
    #[arg(long)]
    prompt_text: Vec<String>,
    /// prompts.jsonl, embedded through the extractor.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Keep only the held-out ids of this split.json.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[command(flatten)]
    input: PromptInput,
}

#[derive(Debug, Args)]
pub struct SuggestArgs {
    #[arg(long, conflicts_with = "series")]
    checkpoints: Option<PathBuf>,
    /// Dense series.csv to run the plateau rule on instead of predictions.
    #[arg(long)]
    series: Option<PathBuf>,
    /// Evaluate the plateau rule only at the training grid's steps.
    #[arg(long)]
    sparse: bool,
    #[command(flatten)]
    input: PromptInput,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON lines from `suggest`.
    #[arg(long)]
    suggestions: PathBuf,
    /// Ground-truth dense series.csv.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Predicted dense series.csv.
    #[arg(long)]
    predicted: Option<PathBuf>,
    #[arg(long)]
    reference_step: Option<u32>,
    #[arg(long)]
    seconds_per_step: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    Exp,
    Step,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    seeds: Option<u32>,
}

pub fn run(cmd: Command, cfg: &mut RunConfig, out: Option<&Path>) -> Result<()> {
    match cmd {
        Command::Grid(a) => grid(a, cfg, out),
        Command::Dedup(a) => dedup(a, cfg, out),
        Command::Lsnr(a) => lsnr(a, cfg, out),
        Command::Dataset(a) => dataset(a, cfg, out),
        Command::Train(a) => train_cmd(a, cfg, out),
        Command::Predict(a) => predict(a, cfg, out),
        Command::Suggest(a) => suggest_cmd(a, cfg, out),
        Command::Eval(a) => eval(a, cfg, out),
        Command::Synth(a) => synth(a, cfg, out),
    }
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    match out {
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) if p == Path::new("-") => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) => Ok(Box::new(BufWriter::new(File::create(p)?))),
    }
}

fn output_dir(out: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.outputs.clone())
        .ok_or_else(|| Error::Validation("an output directory is required (--out)".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Validation(format!("missing {what} path")))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_embeddings(path: &Path) -> Result<Vec<(u64, EmbeddingVector)>> {
    Ok(read_bfem(open(path)?)?.records)
}

fn read_series(path: &Path) -> Result<BTreeMap<(u64, MetricKind), MetricSeries>> {
    Ok(parse_series_table(open(path)?)?.into_iter().map(|s| ((s.prompt_id, s.metric), s)).collect())
}

fn checkpoint_path(dir: &Path, metric: MetricKind) -> PathBuf {
    dir.join(format!("{}.json", metric.name().to_lowercase()))
}

// Alias keeps clap from treating the list as a repeated flag.
type StepList = Vec<u32>;

fn parse_step_list(s: &str) -> std::result::Result<Vec<u32>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|e| format!("{t:?}: {e}")))
        .collect()
}

fn grid(a: GridArgs, cfg: &mut RunConfig, out: Option<&Path>) -> Result<()> {
    if let Some(i) = a.max_i {
        cfg.grid.max_i = i;
    }
    if let Some(extras) = a.extras {
        cfg.grid.extras = extras.into_iter().collect();
    }
    if a.include_one {
        cfg.grid.include_one = true;
    }
    if a.no_include_one {
        cfg.grid.include_one = false;
    }
    let g = build_timestep_grid(&cfg.grid)?;
    let mut w = output(out)?;
    serde_json::to_writer(&mut w, &g)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn dedup(a: DedupArgs, cfg: &mut RunConfig, out: Option<&Path>) -> Result<()> {
    if let Some(t) = a.threshold {
        cfg.dedup.threshold = t;
    }
    let emb = read_embeddings(&required(a.embeddings, &cfg.paths.embeddings, "embeddings")?)?;
    let kept = dedup_prompts(&emb, &cfg.dedup)?;
    log::info!("kept {} of {} prompts", kept.len(), emb.len());
    let mut w = output(out)?;
    match a.prompts.or_else(|| cfg.paths.prompts.clone()) {
        Some(p) => {
            let keep: BTreeSet<u64> = kept.into_iter().collect();
            let prompts: Vec<Prompt> = read_prompts(open(&p)?)?.into_iter().filter(|p| keep.contains(&p.id)).collect();
            write_prompts(&mut w, &prompts)?;
        }
        None => {
            for id in kept {
                writeln!(w, "{id}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Sorted numeric subdirectories or `.png` stems of `dir`.
fn numbered_entries(dir: &Path, png: bool) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let stem = if png {
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            path.file_stem()
        } else {
            if !path.is_dir() {
                continue;
            }
            path.file_name()
        };
        let Some(n) = stem.and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) else {
            log::warn!("skipping {}", path.display());
            continue;
        };
        out.push((n, path));
    }
    out.sort();
    Ok(out)
}

fn to_u32(n: u64, what: &str, path: &Path) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Validation(format!("{what} {n} too large in {}", path.display())))
}

fn lsnr(a: LsnrArgs, cfg: &mut RunConfig, out: Option<&Path>) -> Result<()> {
    if let Some(s) = a.sigma {
        cfg.lsnr.sigma = s;
    }
    if let Some(r) = a.kernel_radius {
        cfg.lsnr.kernel_radius = r;
    }
    if let Some(c) = a.ceiling_db {
        cfg.lsnr.snr_db_ceiling = c;
    }
    cfg.lsnr.validate()?;
    let lc = cfg.lsnr;
    let mut w = output(out)?;

    if let Some(root) = a.images.or_else(|| cfg.paths.images.clone()) {
        let mut jobs = Vec::new();
        for (pid, pdir) in numbered_entries(&root, false)? {
            for (seed, sdir) in numbered_entries(&pdir, false)? {
                for (t, file) in numbered_entries(&sdir, true)? {
                    jobs.push((pid, to_u32(seed, "seed", &sdir)?, to_u32(t, "timestep", &file)?, file));
                }
            }
        }
        let samples: Vec<Result<MetricSample>> = jobs
            .par_iter()
            .map(|(pid, seed, t, file)| {
                let img = GrayImage::open(file)?;
                MetricSample::new(*pid, *seed, *t, MetricKind::Lsnr, l_snr_score(&img, &lc))
            })
            .collect();
        let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
        emit_metric_table(&mut w, &samples)?;
    } else {
        if a.files.is_empty() {
            return Err(Error::Validation("give image files or --images DIR".into()));
        }
        writeln!(w, "path,l_snr_db,score")?;
        for f in &a.files {
            let img = GrayImage::open(f)?;
            writeln!(w, "{},{},{}", f.display(), l_snr_db(&img, &lc), l_snr_score(&img, &lc))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn dataset(a: DatasetArgs, cfg: &mut RunConfig, out: Option<&Path>) -> Result<()> {
    if let Some(f) = a.split_fraction {
        cfg.split_fraction = f;
    }
    let mut metric_files = a.metrics;
    if metric_files.is_empty() {
        metric_files.extend(cfg.paths.metrics.clone());
    }
    if metric_files.is_empty() {
        return Err(Error::Validation("missing metrics path".into()));
    }
    let grid = build_timestep_grid(&cfg.grid)?;
    let mut samples = Vec::new();
    for f in &metric_files {
        samples.extend(parse_metric_table(open(f)?)?);
    }

    let emb_path = a.embeddings.or_else(|| cfg.paths.embeddings.clone());
    if a.dedup {
        let path = emb_path.ok_or_else(|| Error::Validation("--dedup needs embeddings".into()))?;
        let present: BTreeSet<u64> = samples.iter().map(|s| s.prompt_id).collect();
        let emb: Vec<(u64, EmbeddingVector)> =
            read_embeddings(&path)?.into_iter().filter(|(id, _)| present.contains(id)).collect();
        if emb.len() != present.len() {
            return Err(Error::Validation(format!(
                "{} prompts have metrics but no embedding",
                present.len() - emb.len()
            )));
        }
        let keep: BTreeSet<u64> = dedup_prompts(&emb, &cfg.dedup)?.into_iter().collect();
        log::info!("dedup kept {} of {} prompts", keep.len(), present.len());
        samples.retain(|s| keep.contains(&s.prompt_id));
    }

    let series = aggregate_seeds(&samples, &grid)?;
    let dense = series.par_iter().map(densify_series).collect::<Result<Vec<_>>>()?;
    let ids: Vec<u64> = dense.iter().map(|s| s.prompt_id).collect::<BTreeSet<_>>().into_iter().collect();
    let split = split_dataset(&ids, cfg.split_fraction, cfg.rng_seed)?;

    let dir = output_dir(out, cfg)?;
    let mut w = BufWriter::new(File::create(dir.join("series.csv"))?);
    emit_series_table(&mut w, &dense)?;
    w.flush()?;
    write_json(&dir.join("split.json"), &split)?;
    write_json(&dir.join("grid.json"), &grid)?;
    if let Some(p) = a.prompts.or_else(|| cfg.paths.prompts.clone()) {
        let keep: BTreeSet<u64> = ids.iter().copied().collect();
        let prompts: Vec<Prompt> = read_prompts(open(&p)?)?.into_iter().filter(|p| keep.contains(&p.id)).collect();
        let mut w = BufWriter::new(File::create(dir.join("prompts.jsonl"))?);
        write_prompts(&mut w, &prompts)?;
        w.flush()?;
    }
    log::info!("{} prompts, {} train / {} eval", ids.len(), split.train.len(), split.eval.len());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    metric: MetricKind,
    epochs: usize,
    final_train_loss: f64,
    final_val_loss: Option<f64>,
    final_val_mae: Option<f64>,
}

fn train_cmd(a: TrainArgs, cfg: &mut RunConfig, out: Option<&Path>) -> Result<()> {
    let data_dir = required(a.dataset, &cfg.paths.dataset, "dataset directory")?;
    let emb = read_embeddings(&required(a.embeddings, &cfg.paths.embeddings, "embeddings")?)?;
    let emb: BTreeMap<u64, EmbeddingVector> = emb.into_iter().collect();
    let series = read_series(&data_dir.join("series.csv"))?;
    let split: Split = serde_json::from_reader(open(&data_dir.join("split.json"))?)?;
    let grid: TimestepGrid = serde_json::from_reader(open(&data_dir.join("grid.json"))?)?;
    let prompt_dim = emb.values().next().map(|e| e.dim()).ok_or_else(|| Error::Validation("no embeddings".into()))?;

    let dir = output_dir(out, cfg)?;
    let metrics: Vec<MetricKind> = a.metric.map_or(MetricKind::ALL.to_vec(), |m| vec![m]);
    let mut log_rows = String::from("metric,epoch,train_loss,val_loss,val_mae\n");
    let mut summary = Vec::new();
    for m in metrics {
        let mut mc = cfg.model_for(m);
        mc.prompt_dim = prompt_dim;
        mc.rng_seed = cfg.rng_seed;
        if let Some(v) = a.epochs {
            mc.epochs = v;
        }
        if let Some(h) = a.hidden {
            mc.hidden = h;
            mc.mlp_dims = vec![2 * h, 2 * h, 1];
        }
        if let Some(v) = a.layers {
            mc.num_layers = v;
        }
        if let Some(v) = a.embed_dim {
            mc.embed_dim = v;
        }
        if let Some(v) = a.learning_rate {
            mc.learning_rate = v;
        }
        if let Some(v) = a.batch_size {
            mc.batch_size = v;
        }
        if let Some(v) = a.step_stride {
            mc.step_stride = v;
        }
        if let Some(v) = a.dropout {
            mc.dropout_rate = v;
        }
        if a.no_position {
            mc.use_position = false;
        }

        let mut examples = Vec::new();
        for ((id, metric), s) in &series {
            if *metric != m {
                continue;
            }
            let e = emb
                .get(id)
                .ok_or_else(|| Error::Validation(format!("prompt {id} has no embedding")))?;
            examples.push(TrainingExample::new(*id, e.clone(), m, s.values().to_vec())?);
        }
        let ckpt = train(&mc, m, &grid, &examples, &split)?;
        for s in &ckpt.loss_trace {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            log_rows.push_str(&format!("{m},{},{},{},{}\n", s.epoch, s.train_loss, opt(s.val_loss), opt(s.val_mae)));
        }
        let last = ckpt.loss_trace.last().copied();
        summary.push(TrainSummary {
            metric: m,
            epochs: mc.epochs,
            final_train_loss: last.map_or(f64::NAN, |s| s.train_loss),
            final_val_loss: last.and_then(|s| s.val_loss),
            final_val_mae: last.and_then(|s| s.val_mae),
        });
        save_checkpoint(&ckpt, &checkpoint_path(&dir, m))?;
    }
    fs::write(dir.join("training_log.csv"), log_rows)?;
    write_json(&dir.join("training_summary.json"), &summary)?;
    Ok(())
}

fn prompt_embeddings(input: PromptInput, cfg: &RunConfig) -> Result<Vec<(u64, EmbeddingVector)>> {
    let mut records = if let Some(p) = input.prompt_embedding {
        read_embeddings(&p)?
    } else if !input.prompt_text.is_empty() || input.prompts.is_some() {
        let prompts = if let Some(p) = input.prompts {
            read_prompts(open(&p)?)?
        } else {
            input
                .prompt_text
                .into_iter()
                .enumerate()
                .map(|(i, t)| Prompt::new(i as u64 + 1, t))
                .collect::<Result<Vec<_>>>()?
        };
        let bin = input
            .extractor
            .or_else(|| cfg.paths.extractor.clone())
            .ok_or_else(|| Error::Validation("prompt text needs --extractor".into()))?;
        extractor::embed_prompts(&bin, &prompts)?.records
    } else if let Some(p) = &cfg.paths.embeddings {
        read_embeddings(p)?
    } else {
        return Err(Error::Validation("give --prompt-embedding, --prompt-text or --prompts".into()));
    };
    if let Some(split) = input.split {
        let split: Split = serde_json::from_reader(open(&split)?)?;
        let keep: BTreeSet<u64> = split.eval.into_iter().collect();
        records.retain(|(id, _)| keep.contains(id));
    }
    records.sort_by_key(|(id, _)| *id);
    Ok(records)
}

fn load_checkpoints(dir: &Path) -> Result<BTreeMap<MetricKind, PredictorCheckpoint>> {
    MetricKind::ALL
        .iter()
        .map(|&m| Ok((m, load_checkpoint(&checkpoint_path(dir, m))?)))
        .collect()
}

fn predict_all(
    ckpts: &BTreeMap<MetricKind, PredictorCheckpoint>,
    records: &[(u64, EmbeddingVector)],
) -> Result<Vec<BTreeMap<MetricKind, MetricSeries>>> {
    let t_n = ckpts.values().map(|c| c.t_n()).collect::<BTreeSet<_>>();
    if t_n.len() != 1 {
        return Err(Error::Shape(format!("checkpoints disagree on the reference step: {t_n:?}")));
    }
    records
        .par_iter()
        .map(|(id, e)| {
            ckpts.iter().map(|(&m, c)| Ok((m, predict_series(c, *id, e, m)?))).collect::<Result<BTreeMap<_, _>>>()
        })
        .collect()
}

fn predict(a: PredictArgs, cfg: &mut RunConfig, out: Option<&Path>) -> Result<()> {
    let ckpts = load_checkpoints(&required(a.checkpoints, &cfg.paths.checkpoints, "checkpoints")?)?;
    let records = prompt_embeddings(a.input, cfg)?;
    let curves = predict_all(&ckpts, &records)?;
    let flat: Vec<MetricSeries> = curves.into_iter().flat_map(|c| c.into_values()).collect();
    let mut w = output(out)?;
    emit_series_table(&mut w, &flat)?;
    w.flush()?;
    Ok(())
}

fn suggest_cmd(a: SuggestArgs, cfg: &mut RunConfig, out: Option<&Path>) -> Result<()> {
    let mut plateau = cfg.plateau.clone();
    let per_prompt: Vec<(u64, BTreeMap<MetricKind, MetricSeries>)> = if let Some(path) = a.series {
        if a.sparse && plateau.sparse_steps.is_none() {
            plateau.sparse_steps = Some(build_timestep_grid(&cfg.grid)?.steps().to_vec());
        }
        let mut by_id: BTreeMap<u64, BTreeMap<MetricKind, MetricSeries>> = BTreeMap::new();
        for ((id, m), s) in read_series(&path)? {
            by_id.entry(id).or_default().insert(m, s);
        }
        by_id.into_iter().collect()
    } else {
        let ckpts = load_checkpoints(&required(a.checkpoints, &cfg.paths.checkpoints, "checkpoints")?)?;
        if a.sparse && plateau.sparse_steps.is_none() {
            plateau.sparse_steps = Some(ckpts[&MetricKind::Lsnr].grid.steps().to_vec());
        }
        let records = prompt_embeddings(a.input, cfg)?;
        let curves = predict_all(&ckpts, &records)?;
        records.iter().map(|(id, _)| *id).zip(curves).collect()
    };
    let suggestions = per_prompt
        .par_iter()
        .map(|(id, curves)| suggest(*id, curves, &plateau))
        .collect::<Result<Vec<_>>>()?;
    let mut w = output(out)?;
    for s in &suggestions {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn eval(a: EvalArgs, cfg: &mut RunConfig, out: Option<&Path>) -> Result<()> {
    if let Some(t) = a.reference_step {
        cfg.eval.reference_step = t;
    }
    if a.seconds_per_step.is_some() {
        cfg.eval.seconds_per_step = a.seconds_per_step;
    }
    let mut suggestions: Vec<BudgetSuggestion> = Vec::new();
    for (i, line) in fs::read_to_string(&a.suggestions)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        suggestions.push(serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    let truth = a.truth.as_deref().map(read_series).transpose()?;
    let predicted = a.predicted.as_deref().map(read_series).transpose()?;
    let (source, curves) = match (&truth, &predicted) {
        (Some(t), _) => (QualitySource::GroundTruth, t),
        (None, Some(p)) => (QualitySource::Predicted, p),
        (None, None) => return Err(Error::Validation("eval needs --truth or --predicted".into())),
    };

    let prompts = suggestions
        .into_iter()
        .map(|s| {
            let quality = MetricKind::ALL
                .iter()
                .map(|&m| {
                    curves
                        .get(&(s.prompt_id, m))
                        .cloned()
                        .map(|c| (m, c))
                        .ok_or_else(|| Error::Validation(format!("no {m} curve for prompt {}", s.prompt_id)))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(EvalPrompt { suggestion: s, quality, source })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = build_report(&prompts, &cfg.eval)?;
    if let (Some(t), Some(p)) = (&truth, &predicted) {
        let ids: BTreeSet<u64> = prompts.iter().map(|p| p.suggestion.prompt_id).collect();
        let subset: BTreeMap<(u64, MetricKind), MetricSeries> =
            p.iter().filter(|((id, _), _)| ids.contains(id)).map(|(k, v)| (*k, v.clone())).collect();
        report.prediction_mae = Some(prediction_mae(&subset, t)?);
    }

    let dir = output_dir(out, cfg)?;
    write_json(&dir.join("report.json"), &report)?;
    let mut w = BufWriter::new(File::create(dir.join("efficiency.csv"))?);
    write_efficiency_csv(&mut w, &report)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("relative_quality.csv"))?);
    write_relative_quality_csv(&mut w, &report)?;
    w.flush()?;
    Ok(())
}

fn synth(a: SynthArgs, cfg: &mut RunConfig, out: Option<&Path>) -> Result<()> {
    let grid = build_timestep_grid(&cfg.grid)?;
    let sc = &mut cfg.synth;
    sc.rng_seed = cfg.rng_seed;
    sc.t_n = grid.reference_step();
    if let Some(n) = a.n {
        sc.n_prompts = n;
    }
    if let Some(d) = a.dim {
        sc.embedding_dim = d;
    }
    if let Some(f) = a.family {
        sc.family = match f {
            FamilyArg::Exp => CurveFamily::SaturatingExp,
            FamilyArg::Step => CurveFamily::StepOnset,
        };
    }
    if let Some(s) = a.noise_sd {
        sc.noise_sd = s;
    }
    if let Some(s) = a.seeds {
        sc.n_seeds = s;
    }
    if sc.onset_max > sc.t_n {
        sc.onset_max = sc.t_n;
        sc.onset_min = sc.onset_min.min(sc.t_n);
    }
    let ds = synth_dataset(sc)?;
    let samples = ds.samples(&grid, cfg.rng_seed.wrapping_add(1))?;

    let dir = output_dir(out, cfg)?;
    let prompts: Vec<Prompt> = ds
        .embeddings
        .iter()
        .map(|(id, _)| Prompt::new(*id, format!("synthetic prompt {id}")))
        .collect::<Result<_>>()?;
    let mut w = BufWriter::new(File::create(dir.join("prompts.jsonl"))?);
    write_prompts(&mut w, &prompts)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("embeddings.bfem"))?);
    write_bfem(&mut w, ds.config.embedding_dim, &ds.embeddings)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    emit_metric_table(&mut w, &samples)?;
    w.flush()?;
    let truth: Vec<MetricSeries> = ds.truth.values().cloned().collect();
    let mut w = BufWriter::new(File::create(dir.join("truth.csv"))?);
    emit_series_table(&mut w, &truth)?;
    w.flush()?;
    write_json(&dir.join("curves.json"), &serde_json::json!({ "config": ds.config, "curves": ds.params }))?;
    Ok(())
}
