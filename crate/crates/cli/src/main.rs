//! `bess`: command-line driver for the battery storage models.

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ManifestInfo, RunConfig};
use error::CliError;

/// Output root used when neither `--out` nor the environment variable is set.
const DEFAULT_ROOT: &str = "bess-out";
const OUT_ENV: &str = "BESS_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "bess", version, about = "Battery storage control: simulation, HJB solves, dual bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config; omitted sections take their defaults (see `bess defaults`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory. Defaults to `$BESS_OUT_DIR/<command>`, or
    /// `bess-out/<command>` when the variable is unset.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Smoothing width for the grid solver.
    #[arg(long, global = true)]
    eps: Option<f64>,

    /// Order of the martingale penalty.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Number of market paths (regime: number of candidates).
    #[arg(long = "n-paths", global = true)]
    n_paths: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate market paths and write them as CSV.
    Simulate,
    /// Solve the smoothed HJB equation on a grid.
    Solve,
    /// Monte-Carlo upper bound from the martingale penalty.
    Bound,
    /// Random bang-bang search for oscillating charge paths.
    Regime,
    /// Monte-Carlo value of a feedback policy.
    Evaluate,
    /// Policy value against the dual bound.
    Gap,
    /// Print the default configuration.
    Defaults,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Solve => "solve",
            Command::Bound => "bound",
            Command::Regime => "regime",
            Command::Evaluate => "evaluate",
            Command::Gap => "gap",
            Command::Defaults => "defaults",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(eps) = cli.eps {
        cfg.solver.eps = eps;
    }
    if let Some(k) = cli.k {
        cfg.dual.k = k;
    }
    if let Some(n) = cli.n_paths {
        match cli.command {
            Command::Regime => cfg.regime.n_paths = n,
            _ => cfg.simulation.n_paths = n,
        }
    }
    if let Command::Regime = cli.command {
        cfg.regime.seed = cfg.require_seed("regime")?;
    }
    cfg.manifest = Some(ManifestInfo {
        command: cli.command.name().to_string(),
        bess_core: bess_core::VERSION.to_string(),
        bess_cli: env!("CARGO_PKG_VERSION").to_string(),
    });
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    match &cli.out {
        Some(dir) => dir.clone(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
            .join(cli.command.name()),
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Defaults = cli.command {
        print!("{}", RunConfig::default().to_toml());
        return Ok(());
    }
    let cfg = resolve(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let out = out_dir(cli);
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    std::fs::write(out.join("manifest.toml"), cfg.to_toml())?;
    let summary = dispatch(cli.command, &cfg, &out)?;
    println!("{summary}");
    Ok(())
}

fn dispatch(command: Command, cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    match command {
        Command::Simulate => commands::simulate_cmd(cfg, out),
        Command::Solve => commands::solve_cmd(cfg, out),
        Command::Bound => commands::bound_cmd(cfg, out),
        Command::Regime => commands::regime_cmd(cfg, out),
        Command::Evaluate => commands::evaluate_cmd(cfg, out),
        Command::Gap => commands::gap_cmd(cfg, out),
        Command::Defaults => unreachable!("handled before the config is resolved"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
