//! `bridgefold` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use bridgefold::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bridgefold", version, about = "Markov-bridge sequence design with energy-preference fine-tuning")]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat JSON training configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file, or directory for `reproduce`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

/// Which structures of a world a command uses.
#[derive(Args, Debug, Clone)]
pub struct Selection {
    /// Split file written by `gen-world --split-out`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Split part to use; defaults to `train` for training commands and
    /// `test` for evaluation, or every structure without a split file.
    #[arg(long, value_enum)]
    pub part: Option<Part>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic world of structures, Potts oracles and mutants.
    GenWorld {
        #[arg(long, default_value_t = 60)]
        structures: usize,
        /// Inclusive length range `MIN..MAX`.
        #[arg(long = "L", value_name = "MIN..MAX", default_value = "20..60")]
        lengths: String,
        #[arg(long, default_value_t = 2)]
        chains: usize,
        #[arg(long, default_value_t = 20)]
        alphabet: usize,
        #[arg(long, default_value_t = 0.1)]
        contact_density: f64,
        #[arg(long, default_value_t = 120)]
        mutants: usize,
        #[arg(long, default_value_t = 3)]
        max_mutations: usize,
        /// Also write a train/val/test split of the structure ids.
        #[arg(long)]
        split_out: Option<PathBuf>,
        /// Split fractions `TRAIN,VAL,TEST`.
        #[arg(long, default_value = "0.5,0.0666666666666666667,0.4333333333333333333")]
        split_fractions: String,
    },
    /// Train the feature-to-token prior head.
    TrainPrior {
        #[arg(long)]
        world: PathBuf,
        #[command(flatten)]
        select: Selection,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// Pretrain the bridge predictor (the reference model).
    Pretrain {
        #[arg(long)]
        world: PathBuf,
        /// Checkpoint holding the prior head.
        #[arg(long)]
        prior: PathBuf,
        #[command(flatten)]
        select: Selection,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Build preference pairs from a world's mutant libraries or an
    /// external score table.
    MakePrefs {
        #[arg(long, required_unless_present = "scores")]
        world: Option<PathBuf>,
        /// CSV or JSONL table of scored sequences.
        #[arg(long, conflicts_with = "world")]
        scores: Option<PathBuf>,
        #[command(flatten)]
        select: Selection,
        #[arg(long, default_value_t = 0.3)]
        top_frac: f64,
        #[arg(long, default_value_t = 0.3)]
        bottom_frac: f64,
        #[arg(long, default_value_t = 50)]
        pairs_per_structure: usize,
    },
    /// Preference fine-tuning from a pretrained reference.
    Finetune {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// dpo_energy (alias full), dpo_only or energy_only.
        #[arg(long, default_value = "dpo_energy")]
        mode: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        beta_dpo: Option<f64>,
        #[arg(long)]
        lambda_energy: Option<f64>,
    },
    /// Reverse-sample designs for a set of structures.
    Sample {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        select: Selection,
        /// Designs per structure.
        #[arg(long, default_value_t = 1)]
        samples: usize,
    },
    /// Perplexity and recovery of native sequences.
    EvalIf {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        select: Selection,
        #[arg(long, default_value_t = 4)]
        likelihood_samples: usize,
        /// Designs per structure for recovery.
        #[arg(long, default_value_t = 1)]
        designs: usize,
    },
    /// ddG prediction metrics on mutant/native pairs or a pair file.
    EvalDdg {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pairs to score; defaults to every (mutant, native) pair.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[command(flatten)]
        select: Selection,
        #[arg(long, default_value_t = 4)]
        likelihood_samples: usize,
    },
    /// Oracle energy table and ZScores of designs from several models.
    EvalEnergy {
        #[arg(long)]
        world: PathBuf,
        /// `NAME=CHECKPOINT`, repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[command(flatten)]
        select: Selection,
        /// Also write the energy table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the full desk-scale experiment and write a pass/fail report.
    Reproduce {
        /// Full experiment configuration (JSON); defaults are built in.
        #[arg(long)]
        preset: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidSchedule(_) => 1,
        Error::Numerical(_) => 3,
        Error::Domain(_)
        | Error::Shape(_)
        | Error::Pairing(_)
        | Error::Data { .. }
        | Error::Corruption(_)
        | Error::Version { .. }
        | Error::Io(_)
        | Error::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
