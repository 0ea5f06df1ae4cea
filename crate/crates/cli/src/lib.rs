//! Command-line experiments for solution-manifold learning.
//!
//! One invocation runs one mode for every configured seed and writes its
//! artifacts (checkpoints, CSV tables, SVG plots) into the output directory.
//! File layouts are described in `docs/file-formats.md`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod modes;
pub mod output;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

pub use config::{ExperimentConfig, Mode, ZGrid};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "solman", version, about = "Learn and evaluate manifolds of optimal solutions")]
pub struct Args {
    /// Experiment config (TOML). Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Seed to run; repeat for several. Replaces the config's seed list.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for objective evaluation.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Latent grid as lo:hi:count.
    #[arg(long = "z-grid")]
    pub z_grid: Option<ZGrid>,
}

impl Args {
    /// The config file (or defaults) with the flags applied on top.
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = Some(m);
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if self.z_grid.is_some() {
            cfg.z_grid = self.z_grid;
        }
        Ok(cfg)
    }
}

/// Validates the config and runs its mode, on a dedicated thread pool when a
/// thread count is set.
pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    cfg.validate()?;
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            pool.install(|| modes::run_mode(cfg))
        }
        None => modes::run_mode(cfg),
    }
}

/// Parses arguments, runs, reports errors on stderr, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match args.resolve().and_then(|cfg| run(&cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
