//! Command-line surface. Every flag can also be set through the `FORGE_*`
//! variable named in its help text.

use std::path::PathBuf;

use clap::builder::BoolishValueParser;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(
    name = "forge",
    version,
    about = "Counterfactual video preference data: generate, pair, train, evaluate, review"
)]
pub struct Cli {
    /// TOML config file; environment variables and flags override it.
    #[arg(long, global = true, env = "FORGE_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Keyframe, propose, filter and edit every anchor, then write clip sets.
    Generate(GenerateArgs),
    /// Build the preference manifest from generated clip sets.
    Pair(PairArgs),
    /// Write the train and holdout parts of a manifest to separate manifests.
    Split(SplitArgs),
    /// Train the tabular toy policy with the mixed preference objective.
    TrainToy(TrainToyArgs),
    /// Score predictions against a manifest and print per-cell accuracy.
    Eval(EvalArgs),
    /// Serve the human review API and media.
    ReviewServe(ReviewServeArgs),
    /// Print per-(task, format) counts of a manifest.
    Stats(StatsArgs),
    /// Check every sample of a manifest against the sample invariants.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct DataRootArg {
    /// Directory holding per-anchor state and clips.
    #[arg(long, env = "FORGE_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSONL file of {"source_video", "source_caption"} records.
    #[arg(long, env = "FORGE_INPUTS")]
    pub inputs: PathBuf,
    #[command(flatten)]
    pub root: DataRootArg,
    /// Actions proposed per anchor.
    #[arg(long, env = "FORGE_NUM_ACTIONS")]
    pub num_actions: Option<usize>,
    /// Concurrent edit jobs.
    #[arg(long, env = "FORGE_WORKERS")]
    pub workers: Option<usize>,
    /// Continue from the state already under the data root.
    #[arg(long, value_parser = BoolishValueParser::new(), env = "FORGE_RESUME")]
    pub resume: bool,
    /// Use deterministic in-process providers and synthetic frames.
    #[arg(long, value_parser = BoolishValueParser::new(), env = "FORGE_MOCK")]
    pub mock: bool,
    #[arg(long, env = "FORGE_MOCK_SEED")]
    pub mock_seed: Option<u64>,
    /// Abort the process once this many mock provider calls have been made.
    #[arg(long, env = "FORGE_MOCK_CRASH_AFTER", requires = "mock")]
    pub mock_crash_after: Option<u64>,
    /// Shell command run as `<cmd> <video> <out_dir>` to extract frames.
    #[arg(long, env = "FORGE_FRAME_EXTRACTOR_CMD")]
    pub frame_extractor_cmd: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitUnitArg {
    Anchor,
    Sample,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[command(flatten)]
    pub root: DataRootArg,
    /// Output manifest; defaults to `<data_root>/dataset/manifest.jsonl`.
    #[arg(long, env = "FORGE_PAIR_OUT")]
    pub out: Option<PathBuf>,
    /// Total samples to aim for, spread evenly over the six cells.
    #[arg(long, env = "FORGE_TARGET_SAMPLES")]
    pub target_samples: Option<usize>,
    #[arg(long, env = "FORGE_VPREF_RATIO")]
    pub vpref_ratio: Option<f64>,
    #[arg(long, env = "FORGE_HOLDOUT_FRACTION")]
    pub holdout_fraction: Option<f64>,
    #[arg(long, env = "FORGE_PAIRING_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "FORGE_SPLIT_UNIT", value_enum, default_value = "anchor")]
    pub split_unit: SplitUnitArg,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, env = "FORGE_MANIFEST")]
    pub manifest: PathBuf,
    /// Receives `train/manifest.jsonl` and `holdout/manifest.jsonl`;
    /// defaults to the manifest's directory.
    #[arg(long, env = "FORGE_SPLIT_OUT")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Train on the train split of this manifest instead of synthetic data.
    #[arg(long, env = "FORGE_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// Contexts in the synthetic preference set.
    #[arg(long, env = "FORGE_TOY_CONTEXTS", default_value_t = 10)]
    pub contexts: usize,
    #[arg(long, env = "FORGE_TOY_STEPS", default_value_t = 200)]
    pub steps: usize,
    #[arg(long, env = "FORGE_TOY_LR", default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, env = "FORGE_BETA", default_value_t = 0.7)]
    pub beta: f64,
    #[arg(long, env = "FORGE_LAMBDA", default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, env = "FORGE_TRAIN_SEED")]
    pub seed: Option<u64>,
    /// Items per step; the whole set when omitted.
    #[arg(long, env = "FORGE_TOY_MINIBATCH")]
    pub minibatch: Option<usize>,
    /// Write the per-step loss trace as CSV.
    #[arg(long, env = "FORGE_TOY_TRACE")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "FORGE_MANIFEST")]
    pub manifest: PathBuf,
    /// JSONL file of {"sample_id", "raw_text"} records.
    #[arg(long, env = "FORGE_PREDICTIONS")]
    pub predictions: PathBuf,
    /// Judge free-form answers with the deterministic mock judge.
    #[arg(long, value_parser = BoolishValueParser::new(), env = "FORGE_MOCK_JUDGE")]
    pub mock_judge: bool,
    /// Write the report as JSON.
    #[arg(long, env = "FORGE_EVAL_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReviewServeArgs {
    #[arg(long, env = "FORGE_MANIFEST")]
    pub manifest: PathBuf,
    /// Append-only label log.
    #[arg(long, env = "FORGE_LABELS")]
    pub labels: PathBuf,
    #[arg(long, env = "FORGE_REVIEW_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "FORGE_REVIEW_PORT", default_value_t = 8787)]
    pub port: u16,
    /// Directory served under `/media`; defaults to the data root.
    #[arg(long, env = "FORGE_MEDIA_ROOT")]
    pub media_root: Option<PathBuf>,
    #[command(flatten)]
    pub root: DataRootArg,
    /// Parent of exported manifests; defaults to `exports/` beside the label log.
    #[arg(long, env = "FORGE_EXPORT_DIR")]
    pub export_dir: Option<PathBuf>,
    #[arg(long, env = "FORGE_REVIEW_ORDER_SEED")]
    pub order_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, env = "FORGE_MANIFEST")]
    pub manifest: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, env = "FORGE_MANIFEST")]
    pub manifest: PathBuf,
    /// Also check that every referenced clip exists under this root.
    #[arg(long, env = "FORGE_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
}

impl GenerateArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            data_root: self.root.data_root.clone(),
            num_actions: self.num_actions,
            workers: self.workers,
            mock_seed: self.mock_seed,
            resume: self.resume,
            ..Default::default()
        }
    }
}

impl PairArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            data_root: self.root.data_root.clone(),
            vpref_ratio: self.vpref_ratio,
            holdout_fraction: self.holdout_fraction,
            target_samples: self.target_samples,
            pairing_seed: self.seed,
            ..Default::default()
        }
    }
}
