//! `mddrad`: synthetic-radar domain adaptation harness.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 I/O or file-format error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mddrad_core::MddError;

use commands::TrainMode;

#[derive(Parser)]
#[command(name = "mddrad", version, about = "MDD domain adaptation on synthetic radar spectrograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "source-only")]
    SourceOnly,
    Mdd,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four dataset splits for a source/target configuration
    /// pair and print their SHA-256 checksums.
    Generate {
        /// Source preset (I-IV) or path to a radar config JSON file.
        #[arg(long = "config-s")]
        config_s: String,
        /// Target preset (I-IV) or path to a radar config JSON file.
        #[arg(long = "config-t")]
        config_t: String,
        #[arg(long = "n-train", default_value_t = 200)]
        n_train: usize,
        #[arg(long = "n-test", default_value_t = 80)]
        n_test: usize,
        /// Number of classes (2-5).
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Spectrogram height (Doppler bins) after resampling.
        #[arg(long, default_value_t = 16)]
        height: usize,
        /// Spectrogram width (time/range bins) after resampling.
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Output directory; defaults to $MDD_DATA_DIR, then ".".
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model (baseline or adversarial adaptation) and write the
    /// checkpoint, metrics CSV and summary JSON.
    Train {
        #[arg(long = "run-config")]
        run_config: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every ordered source/target pair of the given configurations
    /// and emit the accuracy matrix.
    Matrix {
        /// Comma-separated preset names, e.g. "I,III".
        #[arg(long)]
        configs: String,
        #[arg(long = "run-config")]
        run_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parallel pair-jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the randomized property suites and report counterexamples.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
}

fn exit_code_for(err: &MddError) -> u8 {
    match err {
        MddError::Contract(_) => 2,
        MddError::Io(_) | MddError::Format(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<u8, MddError> {
    match cli.command {
        Command::Generate {
            config_s,
            config_t,
            n_train,
            n_test,
            k,
            seed,
            height,
            width,
            out,
        } => {
            commands::cmd_generate(
                &config_s, &config_t, n_train, n_test, k, seed, height, width, out,
            )?;
            Ok(0)
        }
        Command::Train {
            run_config,
            mode,
            out,
        } => {
            let mode = match mode {
                ModeArg::SourceOnly => TrainMode::SourceOnly,
                ModeArg::Mdd => TrainMode::Mdd,
            };
            commands::cmd_train(&run_config, mode, &out)?;
            Ok(0)
        }
        Command::Matrix {
            configs,
            run_config,
            out,
            jobs,
        } => {
            commands::cmd_matrix(&configs, &run_config, &out, jobs)?;
            Ok(0)
        }
        Command::Verify {
            suite,
            seed,
            trials,
        } => {
            if commands::cmd_verify(&suite, seed, trials)? {
                Ok(0)
            } else {
                Ok(1)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
