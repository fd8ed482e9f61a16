mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or missing inputs (exit 2).
    Usage(String),
    /// A check the command exists to run did not pass (exit 1).
    Check(String),
    /// Anything that failed while running (exit 3).
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<lvlm_core::Error> for CliError {
    fn from(e: lvlm_core::Error) -> Self {
        match e {
            lvlm_core::Error::Config(m) => CliError::Usage(m),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "lvlm", version, about = "Train, evaluate and ablate a VLM with a language-to-vision feedback loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Flat TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    /// Run the learning-rate sweep and merge the two best arms.
    #[arg(long)]
    sweep: bool,
    /// Evaluate only this benchmark.
    #[arg(long)]
    benchmark: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone on synthetic data.
    Pretrain(Common),
    /// Train the feedback path on a frozen backbone.
    Train(Common),
    /// Score a checkpoint on the benchmarks.
    Eval(Common),
    /// Train and score every variant.
    Ablate(Common),
    /// Interpolate two checkpoints.
    Merge {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check analytic against numeric gradients on the micro model.
    Gradcheck(Common),
    /// Write synthetic datasets.
    Datagen(Common),
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let ov = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            variant: self.variant.clone(),
            sweep: self.sweep,
            benchmark: self.benchmark.clone(),
        };
        RunConfig::load(self.config.as_deref(), &ov)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain(c) => commands::pretrain_cmd(&c.load()?),
        Command::Train(c) => commands::train(&c.load()?),
        Command::Eval(c) => commands::eval(&c.load()?),
        Command::Ablate(c) => commands::ablate(&c.load()?),
        Command::Merge { a, b, common } => commands::merge(&common.load()?, &a, &b),
        Command::Gradcheck(c) => commands::gradcheck(&c.load()?),
        Command::Datagen(c) => commands::datagen(&c.load()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
