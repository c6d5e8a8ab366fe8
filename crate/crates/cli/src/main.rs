//! `dpr`: data preparation, training, certification and FGSM comparison for
//! direct perception regression networks.

mod attack;
mod certify;
mod common;
mod config;
mod exit;
mod prep;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::resolve;

#[derive(Parser)]
#[command(name = "dpr", version, about)]
struct Cli {
    /// TOML file with settings; keys are flag names, optionally under a
    /// table named after the subcommand. Flags override the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset directory from TuSimple labels or synthetic scenes.
    DataPrep(prep::PrepArgs),
    /// Train one model per seed with a staged schedule.
    Train(train::TrainArgs),
    /// Check which samples provably stay in their tolerance band.
    Certify(certify::CertifyArgs),
    /// Minimal FGSM step per image for one model.
    Attack(attack::AttackArgs),
    /// Bucket images by which of two models needs the larger FGSM step.
    Compare(attack::CompareArgs),
}

fn run(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::DataPrep(a) => prep::run(resolve(&a, file, "data-prep")?),
        Command::Train(a) => train::run(resolve(&a, file, "train")?),
        Command::Certify(a) => certify::run(resolve(&a, file, "certify")?),
        Command::Attack(a) => attack::run_attack(resolve(&a, file, "attack")?),
        Command::Compare(a) => attack::run_compare(resolve(&a, file, "compare")?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit::exit_code(&err))
        }
    }
}
