//! The `fdgan` command line: dataset generation, training, evaluation,
//! ablation sweeps and gradient checks.
//!
//! Exit codes: 0 success, 1 check or runtime failure, 2 usage or
//! validation error, 3 numerical abort during training.

mod ablate;
mod check;
mod data;
mod eval;
mod overrides;
pub mod pipeline;
mod run_dir;
mod train;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fdgan_core::error::Error;

pub use overrides::apply_override;
pub use run_dir::{RunManifest, CONFIG_FILE, MANIFEST_FILE};

/// Default root for run directories when `--out` is not given.
pub const OUT_ROOT_ENV: &str = "FDGAN_OUT";

#[derive(Debug, Parser)]
#[command(name = "fdgan", version, about = "Factor-decomposed text-to-image GAN on a captioned-shapes benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a captioned-shapes dataset to a directory.
    MakeData(data::MakeDataArgs),
    /// Train one variant on a dataset directory.
    Train(train::TrainArgs),
    /// Score a checkpoint (or the oracle renderer) and optionally draw a factor grid.
    Eval(eval::EvalArgs),
    /// Train and score every ablation variant with a shared seed and budget.
    Ablate(ablate::AblateArgs),
    /// Finite-difference gradient checks of the layers and tiny networks.
    CheckGrads(check::CheckGradsArgs),
}

/// Options shared by commands that create output directories.
#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output directory; defaults to a fresh directory under the output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root for generated run directories.
    #[arg(long, env = OUT_ROOT_ENV, default_value = "runs", hide_env_values = true)]
    pub out_root: PathBuf,
}

/// Why a command failed, which fixes its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Check(String),
    Numerical { error: anyhow::Error, last_checkpoint: Option<PathBuf> },
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Failure::Usage(anyhow::anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Runtime(_) | Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numerical { .. } => 3,
        }
    }

    fn report(&self) {
        match self {
            Failure::Usage(e) => eprintln!("error: {e:#}"),
            Failure::Check(msg) => eprintln!("check failed: {msg}"),
            Failure::Runtime(e) => eprintln!("error: {e:#}"),
            Failure::Numerical { error, last_checkpoint } => {
                eprintln!("numerical abort: {error:#}");
                match last_checkpoint {
                    Some(p) => eprintln!("last good checkpoint: {}", p.display()),
                    None => eprintln!("last good checkpoint: none written"),
                }
            }
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Checkpoint(_) => Failure::Usage(e.into()),
            Error::Numerical(_) | Error::NonFinite { .. } => Failure::Numerical { error: e.into(), last_checkpoint: None },
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

pub type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.exit_code())
        }
    }
}

pub fn execute(command: Command) -> CmdResult {
    match command {
        Command::MakeData(a) => data::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Ablate(a) => ablate::run(a),
        Command::CheckGrads(a) => check::run(a),
    }
}

fn parse_device(s: &str) -> Result<String, String> {
    match s {
        "cpu" => Ok(s.to_string()),
        other => Err(format!("device {other:?} is not available; this build runs on: cpu")),
    }
}
