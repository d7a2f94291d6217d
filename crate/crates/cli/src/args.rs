use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use dilnet::data::{AugmentationConfig, Split};
use dilnet::gradcheck::Scope;
use dilnet::train::TrainConfig;
use dilnet::Variant;

#[derive(Parser, Debug)]
#[command(name = "dilnet", version, about = "Multi-dilation CNNs and multi-resolution feature fusion for binary image classification")]
pub struct Cli {
    /// Output directory for manifests, checkpoints, traces and reports.
    #[arg(long, global = true, env = "DILNET_OUT", default_value = "runs")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Index a dataset (or generate a synthetic one) and split it into train/test.
    Prepare(PrepareArgs),
    /// Stage 1: train one DilationNet variant end to end.
    Train(TrainArgs),
    /// Stage 2: train a fusion head over frozen stage-1 backbones.
    Fuse(FuseArgs),
    /// Score a checkpoint on one partition of a manifest.
    Eval(EvalArgs),
    /// Run both stages on nested fractions of the training partition.
    FractionSweep(SweepArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
#[group(skip)]
#[command(group = ArgGroup::new("source").required(true).args(["data", "synthetic"]))]
pub struct PrepareArgs {
    /// Dataset root holding `Parasitized/` and `Uninfected/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate this many synthetic samples instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub split_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

/// Overrides on top of a stage's default training configuration.
#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f32>,
    /// L2 coefficient on convolution and dense weights.
    #[arg(long)]
    pub l2: Option<f32>,
    #[arg(long)]
    pub beta1: Option<f32>,
    #[arg(long)]
    pub beta2: Option<f32>,
    /// Adam epsilon.
    #[arg(long)]
    pub adam_eps: Option<f32>,
    /// Seed for initialization, shuffling, augmentation and the validation hold-out.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stop after this many epochs without a better validation result.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Share of the training partition held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Flip, rotate and brightness augmentation.
    #[arg(long, value_enum)]
    pub augment: Option<Switch>,
}

impl TrainFlags {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.l2 {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.beta2 = v;
        }
        if let Some(v) = self.adam_eps {
            cfg.epsilon = v;
        }
        if let Some(v) = self.val_fraction {
            cfg.validation_fraction = v;
        }
        if self.patience.is_some() {
            cfg.patience = self.patience;
        }
        match self.augment {
            Some(Switch::On) => cfg.augmentation = Some(AugmentationConfig::default()),
            Some(Switch::Off) => cfg.augmentation = None,
            None => {}
        }
        cfg.seed = self.seed;
        cfg
    }
}

/// Stage 1 trains with augmentation, stage 2 without.
pub fn stage1_defaults() -> TrainConfig {
    TrainConfig::default()
}

pub fn stage2_defaults() -> TrainConfig {
    TrainConfig { augmentation: None, ..TrainConfig::default() }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub variant: Variant,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Train on this stratified fraction of the training partition.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Seed of the fraction draw.
    #[arg(long, default_value_t = 0)]
    pub fraction_seed: u64,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Member variants, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "A,B,C,D")]
    pub members: Vec<Variant>,
    /// Directory holding `dilationnet-<V>.ckpt` files; defaults to the output directory.
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Train and score every combination of two or more members.
    #[arg(long)]
    pub all_combinations: bool,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub fraction_seed: u64,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    pub fn partition(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Require the checkpoint to consume this input resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fractions of the training partition, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "A,B,C,D")]
    pub members: Vec<Variant>,
    /// Seed of the nested fraction draws.
    #[arg(long, default_value_t = 0)]
    pub fraction_seed: u64,
    /// Stage-2 epochs; defaults to `--epochs`.
    #[arg(long)]
    pub head_epochs: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "ops")]
    pub scope: Scope,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the convolution weight gradient by 1.25 to prove the checks bite.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}
