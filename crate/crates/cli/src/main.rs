mod commands;
mod config;
mod extractor;

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;

use config::RunConfig;

const DEFAULT_RUN_LOG: &str = "budgetfusion-runs.log";

#[derive(Debug, Parser)]
#[command(name = "budgetfusion", version, about = "Per-prompt denoising step budgets")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file or directory; `-` is stdout where a file is expected.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Append-only provenance log.
    #[arg(long, global = true, env = "BUDGETFUSION_RUN_LOG")]
    run_log: Option<PathBuf>,

    #[command(subcommand)]
    command: commands::Command,
}

fn append_provenance(path: &Path, cfg: &RunConfig, command: &str, code: u8) -> std::io::Result<()> {
    let unix_time = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let line = serde_json::json!({
        "unix_time": unix_time,
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg.rng_seed,
        "exit_code": code,
    });
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")
}

/// Parses `args`, runs the subcommand and returns the process exit code.
fn run_cli<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };

    let mut cfg = match RunConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return if e.is_io() { 2 } else { 1 };
        }
    };
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return 2;
        }
    }

    let name = cli.command.name();
    let code = match commands::run(cli.command, &mut cfg, cli.out.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    };

    let log_path = cli
        .run_log
        .or_else(|| cfg.paths.run_log.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_LOG));
    if let Err(e) = append_provenance(&log_path, &cfg, name, code) {
        log::warn!("could not append to run log {}: {e}", log_path.display());
    }
    code
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BUDGETFUSION_LOG", "warn")).init();
    ExitCode::from(run_cli(std::env::args_os()))
}

#[cfg(test)]
mod tests;
