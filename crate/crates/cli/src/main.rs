use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Validate, compile, execute and mutate orchestration specs, and train the
/// simulated orchestration policy.
#[derive(Debug, Parser)]
#[command(name = "orchestra", version)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice. Defaults to the config value (42).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a spec and print the report as JSON. Exits 1 if invalid.
    Validate { spec: PathBuf },
    /// Compile a spec and print its graph.
    Compile {
        spec: PathBuf,
        #[arg(long, value_enum, default_value_t = GraphFormat::Json)]
        format: GraphFormat,
    },
    /// Execute a spec on one or more tasks and emit execution records as JSONL.
    Run {
        spec: PathBuf,
        /// JSON task object, or JSONL with one task per line.
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendKind::Scripted)]
        backend: BackendKind,
        /// Persist node results in a cache file (default `.orchestra-cache.json`).
        #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = ".orchestra-cache.json")]
        cache: Option<PathBuf>,
        /// Write records here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply one counterfactual edit; writes the edited spec and prints the pair as JSON.
    Mutate {
        spec: PathBuf,
        /// Mutation family; drawn from the uniform sampler when omitted.
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        /// Path of the edited spec.
        #[arg(long, default_value = "mutated.yaml")]
        out: PathBuf,
    },
    /// Train the simulated policy and write report.csv and report.jsonl.
    TrainSim {
        #[arg(long, value_enum)]
        cf: Option<Toggle>,
        /// Output directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Override the iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GraphFormat {
    Json,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Scripted,
    Synthetic,
    Http,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    #[value(alias = "edge")]
    Dep,
    Role,
    #[value(alias = "capacity")]
    Cap,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid spec, infeasible mutation, bad config and the like.
    #[error("{0}")]
    Domain(String),
    /// IO or network failure.
    #[error("{0}")]
    Env(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Env(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Env(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::FileConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    match cli.command {
        Command::Validate { spec } => commands::validate(&spec),
        Command::Compile { spec, format } => commands::compile(&spec, matches!(format, GraphFormat::Dot)),
        Command::Run {
            spec,
            task,
            backend,
            cache,
            out,
        } => commands::run(&cfg, &spec, &task, backend, cache.as_deref(), out.as_deref()),
        Command::Mutate { spec, kind, out } => commands::mutate(&cfg, &spec, kind, &out),
        Command::TrainSim { cf, out, iterations } => {
            if let Some(t) = cf {
                cfg.train.counterfactual.enabled = matches!(t, Toggle::On);
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            commands::train_sim(&cfg, &out)
        }
    }
}
