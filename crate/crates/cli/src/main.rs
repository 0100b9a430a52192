mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Inverse-free sparse variational GP training and diagnostics.
#[derive(Debug, Parser)]
#[command(name = "ifsvgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write its trace, metrics and dump.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Train several variants on the same data and seed and merge their loss traces.
    Compare {
        /// Variants in label form, e.g. W 'L(P)' 'R(NP)'.
        #[arg(required = true, num_args = 2..)]
        variants: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
        /// Run each variant in its own process, all at once.
        #[arg(long)]
        parallel: bool,
    },
    /// Run a built-in verification suite against dense oracles.
    Verify {
        /// natgrad, bounds, sandwich, hutchinson or all
        #[arg(default_value = "all")]
        suite: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Criterion {
    Frobenius,
    Gap,
}

#[derive(Debug, Clone, Default, Args)]
struct RunArgs {
    /// TOML run configuration; omitted keys fall back to its preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inner-loop stopping tolerance.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum)]
    criterion: Option<Criterion>,
    /// Hutchinson probes per iteration, or `exact`.
    #[arg(long)]
    probes: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// snelson, banana or csv:PATH
    #[arg(long)]
    dataset: Option<String>,
    /// Target column for CSV data.
    #[arg(long)]
    target: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
struct VariantArgs {
    /// M, W, L or R
    #[arg(long)]
    flavor: Vec<String>,
    #[arg(long, value_enum)]
    precondition: Option<Switch>,
    #[arg(long, value_enum)]
    ng: Option<Switch>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    ChecksFailed(Vec<String>),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
            CliError::ChecksFailed(names) => write!(f, "failed checks: {}", names.join(", ")),
        }
    }
}

impl From<ifsvgp::Error> for CliError {
    fn from(err: ifsvgp::Error) -> Self {
        if err.is_config() {
            CliError::Config(err.to_string())
        } else {
            CliError::Numeric(err.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { run, variant } => commands::train(&run, &variant),
        Command::Compare {
            variants,
            run,
            parallel,
        } => commands::compare(&run, &variants, parallel),
        Command::Verify { suite } => commands::verify(&suite),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("ifsvgp: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
