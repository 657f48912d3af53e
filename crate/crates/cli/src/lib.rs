//! The `blapose` command line. Exit status 0 on success, 1 for invalid
//! input or usage, 2 when a valid request fails while running.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

mod commands;
pub mod config;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<blapose::Error> for CliError {
    fn from(e: blapose::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "blapose", version, about = "Bone-length-aware 3D pose estimation tools")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random stream, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print a machine-readable JSON summary on standard output.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Uniform,
    Normal,
    Synthetic,
    /// No length augmentation.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a length bank with one of the augmentation generators.
    GenLengths {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Source bank for the synthetic strategy; the corpus mesh bank by default.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Align the bank's mean with the training set's before sampling.
        #[arg(long)]
        align_mean: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the length model.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Length bank for the synthetic strategy; mean-aligned before use.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Train the single-direction model used for online updates.
        #[arg(long)]
        unidirectional: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_flip: bool,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log (JSON).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict one length vector per sequence.
    PredictLengths {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Step frame by frame and keep the final estimate.
        #[arg(long)]
        online: bool,
        #[arg(long)]
        no_flip: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit (or load) the toy lifter and lift a split.
    LiftToy {
        #[arg(long)]
        corpus: PathBuf,
        /// Existing lifter; fitted on the training split when absent.
        #[arg(long)]
        lifter: Option<PathBuf>,
        #[arg(long)]
        save_lifter: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace the bone lengths of predicted poses.
    Adjust {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        lengths: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted poses against a corpus split.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fine-tune the toy lifter through the length adjustment.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lifter: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Time online length updates with and without adjustment.
    Bench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lifter: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render tables and charts from earlier outputs.
    Report {
        /// `report.json` written by `eval`.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        train_log: Option<PathBuf>,
        /// Corpus whose population statistics to chart.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            if cli.common.json {
                println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            } else if let Value::Object(map) = &summary {
                for (k, v) in map {
                    println!("{k}: {v}");
                }
            }
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and returns its JSON summary.
pub fn execute(cli: &Cli) -> Result<Value, CliError> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(cli.common.seed);
    cfg.validate()?;
    commands::dispatch(&cli.command, &cfg)
}
