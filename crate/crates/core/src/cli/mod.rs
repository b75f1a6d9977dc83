//! Command-line driver: dataset generation, conditional fitting, memory
//! bank construction, solving and evaluation.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use crate::error::Error;
use crate::solver::Mode;

pub use commands::{bank_build, evaluate, fit_conditional, phantom_gen, solve};
pub use config::{Partition, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("refusing to overwrite {0} (pass --force)")]
    Collision(String),

    #[error(transparent)]
    Lib(#[from] Error),
}

impl CliError {
    /// 0 success, 2 config error, 3 fingerprint mismatch, 4 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Collision(_) => 2,
            CliError::Lib(Error::FingerprintMismatch { .. }) => 3,
            CliError::Lib(Error::MissingArtifact(_)) => 4,
            CliError::Lib(Error::InvalidParameter { .. } | Error::TimeOutOfRange { .. }) => 2,
            CliError::Lib(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    PhantomGen,
    FitConditional,
    BankBuild,
    Solve,
    Evaluate,
}

#[derive(Debug, Clone)]
pub struct Options {
    pub config: PathBuf,
    pub mode: Mode,
    /// `None` means every partition for `phantom-gen` and `ind` elsewhere.
    pub partition: Option<Partition>,
    pub force: bool,
}

/// Runs one command and returns the lines it reports on stdout.
pub fn run(command: Command, opts: &Options) -> Result<Vec<String>, CliError> {
    let cfg = RunConfig::load(&opts.config)?;
    let partition = opts.partition.unwrap_or(Partition::Ind);
    match command {
        Command::PhantomGen => {
            let parts: Vec<Partition> = match opts.partition {
                Some(p) => vec![p],
                None => Partition::ALL.to_vec(),
            };
            let mut out = Vec::new();
            for p in parts {
                out.extend(phantom_gen(&cfg, p, opts.force)?);
            }
            Ok(out)
        }
        Command::FitConditional => fit_conditional(&cfg),
        Command::BankBuild => bank_build(&cfg, partition),
        Command::Solve => solve(&cfg, partition, opts.mode),
        Command::Evaluate => evaluate(&cfg, partition),
    }
}
