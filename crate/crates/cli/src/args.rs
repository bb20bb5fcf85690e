use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ctcmix", version, about = "CTC line recognition with manifold mixup")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic line dataset.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoints, trainlog.tsv and resolved.cfg.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run the CTC, gradient and sampler property suites.
    Selftest(SelftestArgs),
    /// Train every arm of one ablation axis over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1100)]
    pub lines: usize,
    #[arg(long, default_value_t = 1.0 / 11.0)]
    pub val_fraction: f64,
    #[arg(long, default_value = "0123456789")]
    pub alphabet: String,
    #[arg(long, default_value_t = 1)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Training settings given on the command line. Each one overrides the
/// config file and environment; values are validated by the config layer.
#[derive(Debug, Args, Default, Clone)]
pub struct Overrides {
    #[arg(long, allow_hyphen_values = true)]
    pub preset: Option<String>,
    /// on or off.
    #[arg(long, allow_hyphen_values = true)]
    pub mixup: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub mixup_alpha: Option<String>,
    /// Comma-separated depths, e.g. 0,4,8.
    #[arg(long, allow_hyphen_values = true)]
    pub mixup_positions: Option<String>,
    /// beta, beta:A, uniform, uniform:LO:HI or fixed:V.
    #[arg(long, allow_hyphen_values = true)]
    pub mixup_dist: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub n_way: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub grad_multiply: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub allow_no_fusion: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub no_fusion_prob: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub dropout: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub lr: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub rho: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub eps: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub batch: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub patience: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub max_epochs: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub seed: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub clip_norm: Option<String>,
    /// Train on N lines drawn by a seeded shuffle.
    #[arg(long, allow_hyphen_values = true)]
    pub train_subset: Option<String>,
    /// Stop once validation CER is below this value.
    #[arg(long, allow_hyphen_values = true)]
    pub target_cer: Option<String>,
}

impl Overrides {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let fields: [(&'static str, &Option<String>); 20] = [
            ("preset", &self.preset),
            ("mixup", &self.mixup),
            ("mixup_alpha", &self.mixup_alpha),
            ("mixup_positions", &self.mixup_positions),
            ("mixup_dist", &self.mixup_dist),
            ("n_way", &self.n_way),
            ("grad_multiply", &self.grad_multiply),
            ("allow_no_fusion", &self.allow_no_fusion),
            ("no_fusion_prob", &self.no_fusion_prob),
            ("dropout", &self.dropout),
            ("lr", &self.lr),
            ("rho", &self.rho),
            ("eps", &self.eps),
            ("batch", &self.batch),
            ("patience", &self.patience),
            ("max_epochs", &self.max_epochs),
            ("seed", &self.seed),
            ("clip_norm", &self.clip_norm),
            ("train_subset", &self.train_subset),
            ("target_cer", &self.target_cer),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
            .collect()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// key=value settings file (overridden by CTCMIX_* variables and flags).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Valid)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Per-line report; defaults to `<checkpoint>.<split>.tsv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check every parameter in the model gradient suite, not a sample.
    #[arg(long)]
    pub full: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Position,
    Nway,
    Gradmult,
    Dist,
    Datasize,
    Dropout,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for per-run outputs and the summary TSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Training-set fractions for the datasize axis.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.5, 0.25])]
    pub sizes: Vec<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}
