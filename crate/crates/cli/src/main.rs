//! `xflood`: synthetic data, training, evaluation, gradient checks and
//! Grad-CAM export for the flood classifier.
//!
//! Exit codes: 0 on success, 1 on a usage or validation failure (including
//! a failed gradient check), 2 on a runtime error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "xflood", version, about = "Multimodal flood classifier harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON model configuration; keys mirror the config field names.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the seed the subcommand uses.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/validation split as NDJSON.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Training samples (defaults to `data.n_train`).
        #[arg(long)]
        n_train: Option<usize>,
        /// Validation samples (defaults to `data.n_val`).
        #[arg(long)]
        n_val: Option<usize>,
        /// Difficulty in [0, 1] (defaults to `data.difficulty`).
        #[arg(long)]
        difficulty: Option<f64>,
    },
    /// Train a model and write metrics, checkpoint, config and predictions.
    Train {
        #[command(flatten)]
        common: Common,
        /// Read `train.ndjson`/`val.ndjson` from here instead of generating.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Also evaluate the training set after every epoch.
        #[arg(long)]
        eval_train: bool,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Evaluate the training split instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// tensor_core, mfim, hcamam, cctfrm, uffm, model or all.
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Grad-CAM heatmap of one validation sample, as PGM plus JSON.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Trained parameters; a freshly initialized model otherwise.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Index into the validation split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Encoder block id.
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
    /// Metrics of a predictions file, optionally McNemar against another.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        predictions: PathBuf,
        /// Second predictions file over the same samples.
        #[arg(long, value_name = "PATH")]
        compare: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Command::Train { common, .. } = &cli.command {
        if common.config.is_none() {
            let mut cmd = Cli::command();
            cmd.build();
            let train = cmd.find_subcommand_mut("train").expect("train subcommand");
            let _ = train
                .error(ErrorKind::MissingRequiredArgument, "`train` requires --config <PATH>")
                .print();
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenData {
            common,
            n_train,
            n_val,
            difficulty,
        } => commands::gen_data(&common, n_train, n_val, difficulty),
        Command::Train {
            common,
            data,
            eval_train,
        } => commands::train(&common, data.as_deref(), eval_train),
        Command::Eval {
            common,
            checkpoint,
            data,
            train_split,
        } => commands::eval(&common, &checkpoint, data.as_deref(), train_split),
        Command::Gradcheck { common, module } => commands::gradcheck(&common, &module),
        Command::Explain {
            common,
            checkpoint,
            sample,
            layer,
        } => commands::explain(&common, checkpoint.as_deref(), sample, layer),
        Command::Metrics {
            common,
            predictions,
            compare,
        } => commands::metrics(&common, &predictions, compare.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
