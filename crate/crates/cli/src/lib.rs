//! Command-line front end: sparsify datasets, train and evaluate single
//! runs, and drive dropout sweeps, ablation grids and training-fraction
//! studies with resumable per-cell outputs.

pub mod artifacts;
pub mod commands;
pub mod plot;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use suster::pipeline::ExperimentConfig;
use suster::stgnn::InnerFactor;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Invalid user input: bad flags, unreadable or inconsistent configs.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// 2 for configuration problems anywhere in the chain, 3 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let is_config = err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || matches!(
                e.downcast_ref::<suster::Error>(),
                Some(suster::Error::Config(_) | suster::Error::Dropout(_))
            )
    });
    if is_config {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

#[derive(Debug, Parser)]
#[command(name = "suster", version, about = "Sparse traffic-field reconstruction experiments")]
pub struct Cli {
    /// Root for relative dataset paths in configs.
    #[arg(long, env = "SUSTER_DATA_DIR", global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a dropout mask for a dataset directory and write mask.csv.
    Sparsify(SparsifyArgs),
    /// Train one model with one seed; writes checkpoint, history and report.
    Train(RunArgs),
    /// Score a checkpoint on the validation and test splits.
    Eval(EvalArgs),
    /// Every configured model at every dropout rate, `n_runs` seeds each.
    Sweep(SweepArgs),
    /// Hidden-graph size grids for the reconstruction model.
    Ablate(AblateArgs),
    /// Train on leading fractions of the training split.
    Fraction(FractionArgs),
    /// Rebuild plots and print tables from CSVs in an output directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SparsifyArgs {
    /// Dataset directory; defaults to the data root.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mask file; defaults to mask.csv inside the dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's first dropout rate.
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave the climatology and carry-forward rows out.
    #[arg(long)]
    pub no_naive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// Number of hidden nodes × embedding width.
    NodesEmbed,
    /// Width multiplier of the inner graph network.
    Factor,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub grid: Grid,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10, 25, 50])]
    pub nodes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 64])]
    pub embeds: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_factor, default_values = ["1.0", "0.5", "0.25", "none"])]
    pub factors: Vec<InnerFactor>,
}

#[derive(Debug, Args)]
pub struct FractionArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])]
    pub fractions: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_factor(s: &str) -> Result<InnerFactor, String> {
    s.parse()
}

/// Reads, validates and seed-overrides an experiment config.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("invalid config {}: {e}", path.display())))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(ConfigError(format!("invalid config {}:\n  {}", path.display(), problems.join("\n  "))).into());
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let root = cli.data_dir.as_deref();
    match cli.command {
        Command::Sparsify(a) => commands::sparsify(root, &a),
        Command::Train(a) => commands::train(root, &a).map(|_| ()),
        Command::Eval(a) => commands::eval(root, &a).map(|_| ()),
        Command::Sweep(a) => commands::sweep(root, &a).map(|_| ()),
        Command::Ablate(a) => commands::ablate(root, &a).map(|_| ()),
        Command::Fraction(a) => commands::fraction(root, &a).map(|_| ()),
        Command::Report(a) => commands::report(&a),
    }
}
