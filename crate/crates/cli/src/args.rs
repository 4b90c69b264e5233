use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "banet",
    version,
    about = "Bridge attention networks at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print parameter and FLOP (multiply-accumulate) counts.
    Count(CountArgs),
    /// Train on a CIFAR-10 binary directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Write per-class mean attention weights.
    ExportAttention(ExportArgs),
    /// Write per-branch feature importance of bridge attention.
    Importance(ImportanceArgs),
    /// Train several attention configurations on identical data and compare.
    Compare(CompareArgs),
    /// Write a synthetic CIFAR-10-format directory.
    SynthData(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttentionArg {
    None,
    Se,
    Ba,
    All,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Built-in name (resnet20, resnet50, resnet101) or a JSON file.
    #[arg(long, default_value = "resnet20")]
    pub arch: String,
    #[arg(long, value_enum, default_value = "ba")]
    pub attention: AttentionArg,
    /// Bridged layers, e.g. `conv1`, `conv1&2`; defaults to all earlier layers.
    #[arg(long)]
    pub bridge_sources: Option<String>,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input as `C,H,W`.
    #[arg(long)]
    pub input_shape: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the first N training records.
    #[arg(long)]
    pub train_samples: Option<usize>,
    /// Use only the first N test records.
    #[arg(long)]
    pub test_samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Training configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated class labels; defaults to all ten.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every sample's squeezed features and weights.
    #[arg(long)]
    pub per_sample: bool,
}

#[derive(Args, Debug)]
pub struct ImportanceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub trees: usize,
    #[arg(long, default_value_t = 8)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 5)]
    pub min_leaf: usize,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Comma-separated configurations: none, se, ba, ba:conv1, ba:conv1&2, ...
    #[arg(long)]
    pub archs: String,
    /// Backbone shared by every configuration.
    #[arg(long, default_value = "resnet20")]
    pub arch: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Records per batch file; the loader accepts only 10000.
    #[arg(long, default_value_t = 10_000)]
    pub records: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
