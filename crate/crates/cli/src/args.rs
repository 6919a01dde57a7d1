use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "lata", version, about = "Latent agreement scoring, agreement-aware calibration and failure detection")]
pub struct Cli {
    /// JSON file with default values for any flag (keys use snake_case, e.g. "k_grid").
    /// Flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert CSV arrays into LATC containers plus a manifest.
    Ingest(IngestArgs),
    /// Per-sample agreement scores of a split against a pool.
    Agree(AgreeArgs),
    /// Fit vanilla and agreement-aware temperature scaling on a validation split.
    Calibrate(CalibrateArgs),
    /// Fit on validation, score every detection method on test.
    Eval(EvalArgs),
    /// Validation AUROC across neighborhood sizes.
    SweepK(SweepKArgs),
    /// k sweep repeated on seeded subsamples of the pool.
    SweepPool(SweepPoolArgs),
    /// Randomized checks of the regression and ranking bounds.
    Theory(TheoryArgs),
    /// Evaluation report plus plot-data CSVs.
    Report(ReportArgs),
    /// Write a synthetic pool/validation/test bundle.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Both,
}

impl Format {
    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Pool,
    Validation,
    Test,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputArgs {
    /// Output directory [default: lata-out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Which artifact formats to write [default: both]
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

impl OutputArgs {
    pub fn dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("lata-out"))
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or(Format::Both)
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolArgs {
    /// Manifest of the reference pool split.
    #[arg(long, value_name = "MANIFEST")]
    pub pool: Option<PathBuf>,
    /// Foundation models to use: "single", "multiple" or a comma-separated list of ids [default: multiple]
    #[arg(long)]
    pub models: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestArgs {
    /// CSV of classifier features, one sample per row.
    #[arg(long, value_name = "CSV")]
    pub features: Option<PathBuf>,
    /// Foundation features as MODEL_ID=CSV; repeat for several models.
    #[arg(long, value_name = "ID=CSV")]
    pub foundation: Vec<String>,
    /// CSV of classifier logits.
    #[arg(long, value_name = "CSV")]
    pub logits: Option<PathBuf>,
    /// CSV of integer labels (one per line, or one row).
    #[arg(long, value_name = "CSV")]
    pub labels: Option<PathBuf>,
    /// Number of classes [default: logits column count]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Split recorded in the manifest [default: test]
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Seed recorded in the manifest [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: lata-out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct AgreeArgs {
    /// Manifest of the split to score.
    #[arg(long, value_name = "MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Neighborhood size [default: 50]
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Manifest of the validation split.
    #[arg(long, value_name = "MANIFEST")]
    pub val: Option<PathBuf>,
    /// Neighborhood size [default: 50]
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Manifest of the validation split.
    #[arg(long, value_name = "MANIFEST")]
    pub val: Option<PathBuf>,
    /// Manifest of the test split.
    #[arg(long, value_name = "MANIFEST")]
    pub test: Option<PathBuf>,
    /// Neighborhood size [default: 50]
    #[arg(long)]
    pub k: Option<usize>,
    /// Also score Spearman, Jaccard and linear-CKA agreement.
    #[arg(long)]
    pub ablation: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepKArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Manifest of the validation split.
    #[arg(long, value_name = "MANIFEST")]
    pub val: Option<PathBuf>,
    /// Comma-separated neighborhood sizes [default: 10,20,50,100,200,500,1000]
    #[arg(long, value_delimiter = ',')]
    pub k_grid: Vec<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepPoolArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Manifest of the validation split.
    #[arg(long, value_name = "MANIFEST")]
    pub val: Option<PathBuf>,
    /// Comma-separated neighborhood sizes [default: 10,20,50,100,200,500,1000]
    #[arg(long, value_delimiter = ',')]
    pub k_grid: Vec<usize>,
    /// Comma-separated pool sizes to subsample.
    #[arg(long, value_delimiter = ',')]
    pub pool_sizes: Vec<usize>,
    /// Subsampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryArgs {
    /// Master seed; each trial derives its own [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trials per bench [default: 1000]
    #[arg(long)]
    pub trials: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Manifest of the validation split.
    #[arg(long, value_name = "MANIFEST")]
    pub val: Option<PathBuf>,
    /// Manifest of the test split.
    #[arg(long, value_name = "MANIFEST")]
    pub test: Option<PathBuf>,
    /// Neighborhood size [default: 50]
    #[arg(long)]
    pub k: Option<usize>,
    /// Bins of the agreement-vs-accuracy curve [default: 10]
    #[arg(long)]
    pub bins: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthArgs {
    /// Generator seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pool rows [default: 10000]
    #[arg(long)]
    pub n_pool: Option<usize>,
    /// Validation rows [default: 1000]
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Test rows [default: 1000]
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Feature dimension [default: 64]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of classes [default: 10]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Number of foundation models [default: 2]
    #[arg(long)]
    pub n_models: Option<usize>,
    /// Output directory [default: lata-out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

fn is_unset(v: &Value) -> bool {
    match v {
        Value::Null | Value::Bool(false) => true,
        Value::Array(a) => a.is_empty(),
        _ => false,
    }
}

/// Overlays the flags that were actually given onto the config-file values.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Value>) -> Result<T, CliError> {
    let Some(config) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(flags)?)?);
    };
    let mut merged = config.clone();
    let Value::Object(target) = &mut merged else {
        return Err(CliError::Config("config file must hold a JSON object".into()));
    };
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (key, value) in given {
            if !is_unset(&value) {
                target.insert(key, value);
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| CliError::Config(format!("config file: {e}")))
}

pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::MissingArgument(format!("--{flag} is required")))
}
