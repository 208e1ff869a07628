//! Command-line front end: synthesize or ingest data, train the two
//! autoencoders, transform recordings, run the baselines, evaluate and
//! tabulate reports.
//!
//! Exit codes: 0 on success, 1 on invalid input or usage, 2 on runtime
//! failure. Relative output paths resolve against `--out-dir`, then the
//! config file's `output_dir`, then `$SVEIL_OUT_DIR`, then the working
//! directory.

mod commands;
mod config;
mod data;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{AaeSection, PipelineConfig, RaeSection, TrainSection};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "SVEIL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "sveil", version, about = "Privacy-preserving transforms for motion sensor time series")]
#[command(after_help = "Examples:
  sveil synth --users 6 --activities 5 --seed 7 --out data
  sveil train-rae --manifest data/manifest.json --in data/data.csv --out rae.model --batch-size 32
  sveil transform --model rae.model --in data/data.csv --out data_rae.csv
  sveil train-aae --manifest data/manifest.json --in data_rae.csv --out aae.model --weights 1,1,1
  sveil evaluate --manifest data/manifest.json --raw data/data.csv --in data_aae.csv --out eval")]
pub struct Cli {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory that relative output paths resolve against
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-user activity dataset and its manifest
    Synth(SynthArgs),
    /// Validate a CSV recording against a manifest and fit standardization
    Ingest(IngestArgs),
    /// Train the replacement autoencoder
    TrainRae(TrainRaeArgs),
    /// Train the anonymizing autoencoder
    TrainAae(TrainAaeArgs),
    /// Apply a trained model to a CSV recording
    Transform(TransformArgs),
    /// Train probe classifiers and report utility and privacy metrics
    Evaluate(EvaluateArgs),
    /// Run a comparison transform or the DTW re-identification rank
    Baseline(BaselineArgs),
    /// Tabulate the metrics of several report files
    Report(ReportArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

/// Training overrides shared by every command that fits networks.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training seed; defaults to the manifest's
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    pub users: usize,
    #[arg(long, default_value_t = 5)]
    pub activities: usize,
    #[arg(long, default_value_t = 20)]
    pub windows_per_pair: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.25)]
    pub noise: f64,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 50.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sensitive activity (default: the second to last)
    #[arg(long)]
    pub sensitive: Option<String>,
    /// Neutral activity (default: the last)
    #[arg(long)]
    pub neutral: Option<String>,
    /// Output directory for data.csv and manifest.json
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory for the canonical data.csv, manifest.json and ingest.json
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainRaeArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Layer widths including the output layer, e.g. 96,24,12,24,96,192
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IdentityTarget {
    /// Hide who the user is
    Users,
    /// Hide the manifest's user attribute
    Attribute,
}

#[derive(Debug, Args)]
pub struct TrainAaeArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// beta_i,beta_a,beta_d
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub aae_steps: Option<usize>,
    #[arg(long)]
    pub adversary_steps: Option<usize>,
    #[arg(long)]
    pub pretrain: Option<usize>,
    #[arg(long, value_enum, default_value_t = IdentityTarget::Users)]
    pub identity: IdentityTarget,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    /// Trained RAE or AAE model; repeat to chain models in order
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    /// Defaults to the manifest stored with the first model
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum EvalTarget {
    Activity,
    Identity,
    Attribute,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Original recording; probes trained on it are the attackers
    #[arg(long)]
    pub raw: PathBuf,
    /// Transformed recording to assess
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output directory for report.json and confusion matrices
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Default: activity, plus identity under a trial split and the attribute when declared
    #[arg(long, value_enum, value_delimiter = ',')]
    pub targets: Option<Vec<EvalTarget>>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Resample,
    Ssa,
    DtwRank,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: BaselineMethod,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Data to transform, or the transformed data to rank
    #[arg(long = "in")]
    pub input: PathBuf,
    /// CSV for resample and ssa, JSON report for dtw-rank
    #[arg(long)]
    pub out: PathBuf,
    /// Target rate of the resampling baseline
    #[arg(long, default_value_t = 10.0)]
    pub to_hz: f64,
    /// Leading SSA components kept (1 or 2 in the usual comparison)
    #[arg(long, default_value_t = 1)]
    pub components: usize,
    /// SSA embedding dimension (default: window / 4)
    #[arg(long)]
    pub embedding: Option<usize>,
    /// Raw reference recording for dtw-rank
    #[arg(long)]
    pub raw: Option<PathBuf>,
    /// Nearest raw windows averaged per transformed window
    #[arg(long, default_value_t = 1)]
    pub votes: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report files with a `metrics` table
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Table file; the extension picks .md, .csv or .json
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub configs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Optional JSON report
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for an error raised while running a command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_INVALID
    } else {
        EXIT_FAILURE
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match commands::execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["sveil", "frobnicate"]), EXIT_INVALID);
        assert_eq!(run(["sveil", "synth", "--bogus"]), EXIT_INVALID);
        assert_eq!(run(["sveil", "--help"]), EXIT_OK);
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(exit_code(&Error::Label("x".into())), EXIT_INVALID);
        assert_eq!(exit_code(&Error::TrainingDiverged { epoch: 1, batch: 2 }), EXIT_FAILURE);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
