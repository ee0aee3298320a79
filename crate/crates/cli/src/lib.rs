//! Batch front end for the rough heat equation solvers.
//!
//! `rheat <audit|convergence|oracle|solve|sample> [--config PATH] [--seed N]
//! [--out DIR] [--override KEY=VALUE]...`
//!
//! Outputs are byte-deterministic for a fixed configuration: every file
//! carries the resolved configuration and the crate version, and wall-clock
//! information goes only to `rheat.log`.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails or the
//! computation breaks down, 2 for usage and configuration errors.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::ExperimentConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Numerics(#[from] rough_heat::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rheat", version, about = "Rough heat equation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Replaces `signal.seed`.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "rheat-out")]
    pub out: PathBuf,

    /// Set one configuration key; may be repeated, applied after the file.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Algebraic and analytic audits of the signal, semigroup and operators.
    Audit,
    /// Error against an oracle or the finest mesh over dyadic meshes.
    Convergence,
    /// Closed-form comparisons: additive fields and the commuting flow.
    Oracle,
    /// One solve with report and snapshots.
    Solve,
    /// Sample the driving signal and write it to disk.
    Sample,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Audit => "audit",
            Command::Convergence => "convergence",
            Command::Oracle => "oracle",
            Command::Solve => "solve",
            Command::Sample => "sample",
        }
    }
}

/// Resolve the configuration from the file, overrides and `--seed`.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let overrides = cli
        .overrides
        .iter()
        .map(|o| {
            o.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Config(format!("--override expects KEY=VALUE, got '{o}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = ExperimentConfig::from_text(&text, &overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Honour `RHEAT_THREADS`; an unusable value is a configuration error.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RHEAT_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("RHEAT_THREADS must be a positive integer, got '{raw}'")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Run one subcommand; `Ok(false)` means a check failed.
pub fn run(cli: &Cli) -> Result<bool, CliError> {
    configure_threads()?;
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    let started = Instant::now();
    let ok = match cli.command {
        Command::Audit => output::write_audit(&cfg, &cli.out)?,
        Command::Convergence => output::write_convergence(&cfg, &cli.out)?,
        Command::Oracle => output::write_oracle(&cfg, &cli.out)?,
        Command::Solve => output::write_solve(&cfg, &cli.out)?,
        Command::Sample => output::write_sample(&cfg, &cli.out)?,
    };
    let finished = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    std::fs::write(
        cli.out.join("rheat.log"),
        format!(
            "command={}\nversion={VERSION}\npass={ok}\nelapsed_seconds={:.3}\nfinished_unix={finished}\n",
            cli.command.name(),
            started.elapsed().as_secs_f64()
        ),
    )?;
    Ok(ok)
}

/// Parse `args`, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("rheat {}: checks failed, see {}", cli.command.name(), cli.out.display());
            1
        }
        Err(e) => {
            eprintln!("rheat {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
