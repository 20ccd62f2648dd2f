use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "mcref",
    version,
    about = "Monte Carlo dropout uncertainty, referral and active learning"
)]
pub struct Cli {
    /// Seed for every random choice (data, splits, initialisation, dropout).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// JSON object or `key=value` lines; keys are long option names.
    /// Options given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier and write a checkpoint.
    Train(TrainCmd),
    /// Monte Carlo dropout predictions for one split.
    McPredict(PredictCmd),
    /// Threshold rejection over a grid of uncertainty thresholds.
    SweepThreshold(SweepCmd),
    /// Informed and random referral as a function of the referred fraction.
    ReferralCurve(CurveCmd),
    /// Cross-validated grid search over the two dropout rates.
    GridDropout(GridCmd),
    /// Run the active-learning loop.
    ActiveLearn(ActiveCmd),
    /// Run the active-learning loop with labels from the HTTP service.
    Serve(ServeCmd),
    /// Re-emit a report as canonical JSON or as CSV.
    ExportReport(ExportCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataSource {
    Synthetic,
    Csv,
    Idx,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value_t = DataSource::Synthetic)]
    pub data: DataSource,
    /// CSV file with header `label,f0,f1,…`.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub idx_images: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub idx_labels: Option<PathBuf>,
    /// Number of classes; inferred from the labels when absent.
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Synthetic sample count.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    /// Synthetic feature dimension.
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Synthetic Bayes error in [0, 0.5].
    #[arg(long, default_value_t = 0.1)]
    pub bayes_error: f64,
    /// Train, validation, test and pool fractions.
    #[arg(long, value_delimiter = ',', num_args = 4, value_name = "F")]
    pub split: Option<Vec<f64>>,
    #[arg(long)]
    pub no_stratify: bool,
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Clone, Args)]
pub struct NetArgs {
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub hidden: Vec<usize>,
    /// Dropout rate between hidden layers.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Dropout rate before the output layer.
    #[arg(long, default_value_t = 0.4)]
    pub beta: f64,
    #[arg(long, default_value_t = mcref_core::nn::DEFAULT_L2_LAMBDA)]
    pub l2: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 5)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 25)]
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SigmaArg {
    PaperLiteral,
    SampleStd,
}

#[derive(Debug, Clone, Args)]
pub struct McArgs {
    /// Stochastic forward passes per sample.
    #[arg(long, default_value_t = mcref_core::uncertainty::DEFAULT_PASSES)]
    pub passes: usize,
    #[arg(long, value_enum, default_value_t = SigmaArg::PaperLiteral)]
    pub sigma_formula: SigmaArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    Pool,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Report path; standard output when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ModelInput {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub mc: McArgs,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub on: SplitName,
}

#[derive(Debug, Args)]
pub struct PredictCmd {
    #[command(flatten)]
    pub input: ModelInput,
    /// Threshold for the certain/uncertain outcome counts.
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    /// Also write per-sample posteriors as JSON lines.
    #[arg(long, value_name = "FILE")]
    pub posteriors: Option<PathBuf>,
    /// Include every pass in the JSON lines output.
    #[arg(long)]
    pub full_samples: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[command(flatten)]
    pub input: ModelInput,
    #[arg(long, value_delimiter = ',', default_value = "0.08,0.1,0.2,0.3")]
    pub taus: Vec<f64>,
    #[arg(long, default_value_t = mcref_core::rejection::DEFAULT_POSITIVE_CLASS)]
    pub positive_class: usize,
    #[arg(long, value_name = "FILE")]
    pub csv_out: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct CurveCmd {
    #[command(flatten)]
    pub input: ModelInput,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
    )]
    pub fractions: Vec<f64>,
    /// Number of random-referral repetitions.
    #[arg(long, default_value_t = 10)]
    pub repeats: u64,
    /// Fraction used for the headline policy in the report.
    #[arg(long, default_value_t = 0.2)]
    pub policy_fraction: f64,
    #[arg(long, default_value_t = mcref_core::rejection::DEFAULT_POSITIVE_CLASS)]
    pub positive_class: usize,
    #[arg(long, value_name = "FILE")]
    pub csv_out: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct GridCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    McDropoutVariance,
    LeastConfidence,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FallbackArg {
    TopKappa,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    Simulated,
    Human,
}

#[derive(Debug, Clone, Args)]
pub struct AlArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub mc: McArgs,
    /// Per-round budget; defaults to a fortieth of the pool.
    #[arg(long)]
    pub kappa: Option<usize>,
    #[arg(long, default_value_t = mcref_core::active::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "mc-dropout-variance"
    )]
    pub strategy: Vec<StrategyArg>,
    #[arg(long, value_enum, default_value_t = FallbackArg::TopKappa)]
    pub fallback: FallbackArg,
    /// Validation accuracy that stops the loop.
    #[arg(long, default_value_t = 0.9)]
    pub target: f64,
    #[arg(long, default_value_t = mcref_core::active::DEFAULT_PATIENCE)]
    pub patience: usize,
    #[arg(long, default_value_t = mcref_core::active::DEFAULT_INITIAL_LABELLED_FRACTION)]
    pub initial_fraction: f64,
    #[arg(long)]
    pub fine_tune_epochs: Option<usize>,
    #[arg(long)]
    pub retrain_from_scratch: bool,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Seeds per strategy; more than one, or several strategies, runs a comparison.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    /// Write the run manifest here after every iteration.
    #[arg(long, value_name = "FILE", requires = "checkpoint")]
    pub manifest: Option<PathBuf>,
    /// Write the current network here after every iteration.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Continue the run recorded in this manifest.
    #[arg(long, value_name = "FILE", requires = "resume_checkpoint")]
    pub resume: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub resume_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ActiveCmd {
    #[command(flatten)]
    pub al: AlArgs,
    #[arg(long, value_enum, default_value_t = OracleArg::Simulated)]
    pub oracle: OracleArg,
    #[command(flatten)]
    pub serve: ServeArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Seconds to wait for a batch of labels before expiring it.
    #[arg(long, default_value_t = 86_400)]
    pub timeout_secs: u64,
    /// Stop serving once the loop finishes.
    #[arg(long)]
    pub exit_when_done: bool,
}

#[derive(Debug, Args)]
pub struct ServeCmd {
    #[command(flatten)]
    pub al: AlArgs,
    #[command(flatten)]
    pub serve: ServeArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ExportCmd {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = ExportFormat::Json)]
    pub format: ExportFormat,
    /// Table to export as CSV; defaults to the first one found.
    #[arg(long)]
    pub table: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}
