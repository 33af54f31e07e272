//! `slotfill`: train, evaluate and run multi-domain slot-filling models.
//!
//! Exit codes: 0 success, 2 configuration, usage or input error, 3 runtime
//! training failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use slotfill::synth::{SUITE_TEST, SUITE_TRAIN};
use slotfill::Error;

use commands::{SynthSource, TrainArgs};

#[derive(Parser)]
#[command(
    name = "slotfill",
    version,
    about = "Multi-domain slot filling with adversarial training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on BIO test files (`name=path`, or a path whose
    /// file name up to the first dot is the domain).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        test: Vec<String>,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Label token blocks with a checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic corpora.
    #[command(group(ArgGroup::new("source").required(true).args(["suite", "spec"])))]
    Synth {
        /// The built-in four-domain suite.
        #[arg(long)]
        suite: bool,
        /// A grammar file.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SUITE_TRAIN)]
        n_train: usize,
        #[arg(long, default_value_t = SUITE_TEST)]
        n_test: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::Shape { .. } | Error::Contract(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => commands::train(TrainArgs { config, seed, out }),
        Command::Eval { ckpt, test, report } => commands::eval(&ckpt, &test, report.as_deref()),
        Command::Predict { ckpt, input, out } => commands::predict(&ckpt, &input, &out),
        Command::Synth {
            suite: _,
            spec,
            seed,
            out,
            n_train,
            n_test,
        } => {
            let source = spec.map_or(SynthSource::Suite, SynthSource::Spec);
            commands::synth(source, seed, n_train, n_test, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
