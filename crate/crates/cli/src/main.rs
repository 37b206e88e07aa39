//! `gazelens`: command-line pipeline from gaze logs to relevance classifiers.
//!
//! Exit codes: 0 on success, 1 when a pipeline stage fails, 2 on usage errors.

mod commands;
mod store;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use gazelens_core::nn::Precision;
use gazelens_core::render::RenderMode;
use gazelens_core::synth::SynthConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "GAZELENS_SEED";

#[derive(Parser, Debug)]
#[command(name = "gazelens", version, about = "Scanpath images and relevance classifiers for eye-tracking data")]
struct Cli {
    /// JSON object of flag values for the subcommand; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic dataset of reading and skimming trials.
    Synth(SynthArgs),
    /// Build a manifest from a trial table and its gaze logs.
    Ingest(IngestArgs),
    /// Detect fixations in every trial's gaze log (I-VT).
    Detect(DetectArgs),
    /// Render one scanpath PNG per usable trial.
    Render(RenderArgs),
    /// Extract the aggregate eye-movement features of every usable trial.
    Features(FeaturesArgs),
    /// Balance classes and assign stratified train/val/test splits.
    Split(SplitArgs),
    /// Train the CNN on the rendered images of the train split.
    TrainCnn(TrainCnnArgs),
    /// Train a feature-based baseline on the train split.
    TrainBaseline(TrainBaselineArgs),
    /// Score trained models on every split and write the metrics report.
    Evaluate(EvaluateArgs),
    /// Grad-CAM heatmaps, class averages and region-mass summaries.
    Gradcam(GradcamArgs),
    /// Print evaluation reports as a comparison table.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Detect(_) => "detect",
            Command::Render(_) => "render",
            Command::Features(_) => "features",
            Command::Split(_) => "split",
            Command::TrainCnn(_) => "train-cnn",
            Command::TrainBaseline(_) => "train-baseline",
            Command::Evaluate(_) => "evaluate",
            Command::Gradcam(_) => "gradcam",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthOutput {
    /// 4 ms gaze-sample logs, to be run through `detect`.
    Gaze,
    /// Fixation tables, skipping detection.
    Fixations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    RandomForest,
    LinearSvm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Direct,
    ScreenThenDownsample,
}

impl From<ModeArg> for RenderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Direct => RenderMode::Direct,
            ModeArg::ScreenThenDownsample => RenderMode::ScreenThenDownsample,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

// Every flag is optional at the clap level so a config file can supply it;
// required values are checked after merging.

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SynthArgs {
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub output: Option<SynthOutput>,
    /// Centroid jitter in px (overrides the simulator setting).
    #[arg(long)]
    pub jitter_sigma: Option<f64>,
    /// Full simulator settings; config file only.
    #[arg(skip)]
    pub synth: Option<SynthConfig>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct LogFormatArgs {
    /// Field delimiter of the gaze logs.
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Gaze logs have no header row.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_header: Option<bool>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct IngestArgs {
    /// CSV with columns trial_id,participant_id,document_id,label,gaze_log.
    #[arg(long)]
    pub trials: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub format: LogFormatArgs,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct DetectArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Saccade threshold in px/s.
    #[arg(long)]
    pub velocity_threshold: Option<f64>,
    /// Shortest kept fixation in ms.
    #[arg(long)]
    pub min_fixation_ms: Option<f64>,
    /// Keep samples the tracker flagged invalid.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub keep_invalid: Option<bool>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub format: LogFormatArgs,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ScreenArgs {
    #[arg(long)]
    pub screen_w: Option<f64>,
    #[arg(long)]
    pub screen_h: Option<f64>,
    /// Directory of per-trial fixation tables (default: `fixations/` next to the manifest).
    #[arg(long)]
    pub fixations_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RenderArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Output images are N x N pixels.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub antialias: Option<bool>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub screen: ScreenArgs,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FeaturesArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Reported hv_ratio when a scanpath has no vertical movement.
    #[arg(long)]
    pub hv_ratio_cap: Option<f64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub screen: ScreenArgs,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train, validation and test fractions, e.g. `0.6,0.2,0.2`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub fractions: Option<Vec<f64>>,
    /// Keep every usable trial instead of downsampling the larger class.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_balance: Option<bool>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainCnnArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub precision: Option<Precision>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainBaselineArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Feature table written by `features`.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<BaselineMethod>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub max_features: Option<usize>,
    #[arg(long)]
    pub min_samples_leaf: Option<usize>,
    /// SVM regularization strength.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// SVM passes over the training set.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Feature table, needed by feature-based models.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// `name=path` of a trained model; repeatable. Defaults to every
    /// known model file under `<out-dir>/models`.
    #[arg(long = "model", value_name = "NAME=PATH")]
    pub models: Option<Vec<String>>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GradcamArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// CNN checkpoint written by `train-cnn`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Conv block to explain, counted from 0 (default: last).
    #[arg(long)]
    pub block: Option<usize>,
    /// Heatmap opacity of the overlays.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Skip the per-trial overlay PNGs.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_overlays: Option<bool>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ReportArgs {
    /// Report JSON written by `evaluate`; repeatable (default: `<out-dir>/report.json`).
    #[arg(long = "report", value_name = "FILE")]
    pub reports: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    pub fn domain(msg: impl Into<String>) -> Self {
        CliError::Domain(msg.into())
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        let mut msg = e.to_string();
        let mut src = e.source();
        while let Some(s) = src {
            let text = s.to_string();
            if !msg.contains(&text) {
                msg.push_str(": ");
                msg.push_str(&text);
            }
            src = s.source();
        }
        CliError::Domain(msg)
    }
}

pub fn required<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("the following required argument was not provided: --{flag}")))
}

/// `--seed`, then the config file, then `GAZELENS_SEED`.
pub fn seed_or_env(seed: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Err(CliError::Usage(format!(
            "the following required argument was not provided: --seed (or {SEED_ENV})"
        ))),
    }
}

fn read_config(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(format!("config {} must hold a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("config {}: {e}", path.display()))),
    }
}

/// Overlays explicitly given flags on the config-file values.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<Map<String, Value>>) -> Result<T, CliError> {
    let mut merged = config.unwrap_or_default();
    let given = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Value::Object(map) = given {
        for (k, v) in map {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref().map(read_config).transpose()?;
    match &cli.command {
        Command::Synth(a) => commands::synth(merge(a, config)?),
        Command::Ingest(a) => commands::ingest(merge(a, config)?),
        Command::Detect(a) => commands::detect(merge(a, config)?),
        Command::Render(a) => commands::render(merge(a, config)?),
        Command::Features(a) => commands::features(merge(a, config)?),
        Command::Split(a) => commands::split(merge(a, config)?),
        Command::TrainCnn(a) => commands::train_cnn(merge(a, config)?),
        Command::TrainBaseline(a) => commands::train_baseline(merge(a, config)?),
        Command::Evaluate(a) => commands::evaluate(merge(a, config)?),
        Command::Gradcam(a) => commands::gradcam(merge(a, config)?),
        Command::Report(a) => commands::report(merge(a, config)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            let mut cmd = Cli::command();
            cmd.build();
            let sub = cmd.find_subcommand_mut(name).expect("subcommand exists");
            sub.error(ErrorKind::MissingRequiredArgument, msg).exit()
        }
        Err(CliError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
