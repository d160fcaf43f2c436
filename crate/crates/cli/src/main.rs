use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

mod commands;
mod config;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  run failed (training, evaluation or I/O error)
  2  invalid command line
  3  unknown config key
  4  invalid config value
  5  input file missing
  6  output already exists (pass --force to overwrite)
  7  evaluation invariant violated
  8  checkpoint was written under a different config
  9  taxonomy violates the rooted-triplet property";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Run(String),
    #[error("unknown config key '{0}' (see --help for the list)")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("{path}: {message}")]
    MissingFile { path: PathBuf, message: String },
    #[error("{0} already exists; pass --force to overwrite")]
    OutputExists(PathBuf),
    #[error("evaluation invariant violated: {0}")]
    Invariant(String),
    #[error("checkpoint config hash {found} does not match the config ({expected})")]
    HashMismatch { expected: String, found: String },
    #[error("{0} rooted-triplet violations")]
    Violations(usize),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Run(_) => 1,
            CliError::UnknownKey(_) => 3,
            CliError::BadConfig(_) => 4,
            CliError::MissingFile { .. } => 5,
            CliError::OutputExists(_) => 6,
            CliError::Invariant(_) => 7,
            CliError::HashMismatch { .. } => 8,
            CliError::Violations(_) => 9,
        }
    }

    pub fn missing(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::MissingFile { path: path.to_path_buf(), message: err.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "relssl", version, about = "Relation-based semi-supervised training over a taxonomy tree")]
#[command(after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic hierarchical dataset.
    #[command(after_long_help = format!("{}\n{EXIT_CODES}", config::key_table("Config keys", config::GENERATOR_KEYS)))]
    Generate(GenerateArgs),
    /// Train one model on a dataset directory.
    #[command(after_long_help = format!("{}\n{EXIT_CODES}", config::key_table("Config keys", config::TRAIN_KEYS)))]
    Train(TrainArgs),
    /// Evaluate a trained run on the held-out splits.
    #[command(after_long_help = EXIT_CODES)]
    Evaluate(EvaluateArgs),
    /// Check a Newick taxonomy for rooted-triplet consistency.
    #[command(after_long_help = EXIT_CODES)]
    VerifyTree(VerifyTreeArgs),
    /// Train and evaluate a grid over variants or tree depths.
    #[command(after_long_help = format!("{}\n{EXIT_CODES}", config::key_table("Config keys", config::TRAIN_KEYS)))]
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable. Wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; wins over both the file and --set.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing output.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    /// Objective variant.
    #[arg(long, value_parser = ["baseline_supervised", "relation_pl", "triplet_cr", "label_transfer"])]
    variant: Option<String>,
    /// Relation levels to keep when cutting the taxonomy.
    #[arg(long)]
    tree_depth: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    output: OutputArgs,
    /// Continue from the checkpoint in --out.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Dataset directory the run was trained on.
    #[arg(long)]
    data: PathBuf,
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Report directory [default: <run>/eval].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    /// Skip the relation pseudo-label accuracy table.
    #[arg(long)]
    no_pseudo_labels: bool,
    /// Seed for sampling pairs in the pseudo-label table.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct VerifyTreeArgs {
    /// Newick file.
    tree: PathBuf,
    /// Enumerate every ordered leaf triple up to this many, sample beyond.
    #[arg(long, default_value_t = 1_000_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Axis {
    Variant,
    TreeDepth,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    axis: Axis,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    model: ModelFlags,
    /// Seeds per grid cell, counting up from the configured seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[command(flatten)]
    output: OutputArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::VerifyTree(a) => commands::verify_tree(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
