//! `ctsynth`: synthesize phantoms, build training pairs, train the 3D cGAN,
//! generate volumes, score them and export blind-test slices.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ctsynth_core::Error;

pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

pub const DEFAULT_RUN_LOG: &str = "ctsynth-runs.log";

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn io(message: impl Into<String>) -> Self {
        CliError { code: EXIT_IO, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::ConfigInvalid(_) | Error::EmptyInput(_) | Error::NotEnoughSlices { .. } => EXIT_USAGE,
            Error::Divergence { .. } => EXIT_DIVERGED,
            _ => EXIT_IO,
        };
        CliError { code, message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GlobalArgs {
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 makes every run bit-reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Floating-point width for training and inference.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    /// TOML file with defaults; flags win over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// File that receives one resolved-config line per run.
    #[arg(long, global = true)]
    pub run_log: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "ctsynth", version, about = "3D conditional GAN for CT volume blocks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write procedural phantom volumes.
    Synth(commands::SynthArgs),
    /// Preprocess volumes into augmented condition/target block pairs.
    Prep(commands::PrepArgs),
    /// Train the generator and discriminator on prepared pairs.
    Train(commands::TrainArgs),
    /// Run a trained generator over a whole volume.
    Generate(commands::GenerateArgs),
    /// PSNR and SSIM of a generated volume against the real one.
    Evaluate(commands::EvaluateArgs),
    /// Export matched real/generated slices as an anonymized image test.
    Blindtest(commands::BlindtestArgs),
    /// Finite-difference check of every autodiff op and a small model.
    Gradcheck(commands::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0; the rest are
            // usage errors.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
