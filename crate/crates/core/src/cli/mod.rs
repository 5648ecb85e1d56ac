//! Command-line front end. Every artifact path is an explicit flag and every command is
//! a pure function of its inputs, configuration and seed.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "paramsal", version, about = "Parameter-space saliency toolkit")]
pub struct Cli {
    /// Worker threads for sample-level parallelism [default: all cores]
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Resolve a dataset source into a verified manifest with split counts and checksums
    PrepareData(PrepareArgs),
    /// Train a model from scratch and write a checkpoint
    Train(TrainArgs),
    /// Loss and accuracy on a split, with optional per-sample predictions
    Eval(EvalArgs),
    /// Per-filter saliency statistics over a reference split
    Stats(StatsArgs),
    /// Standardized profiles of a split (index) or of one sample (CSV)
    Profile(ProfileArgs),
    /// Nearest neighbors of a sample in saliency space
    Knn(KnnArgs),
    /// Filter pruning sweep
    ExpPrune(PruneArgs),
    /// Random filter perturbation sweep
    ExpPerturb(PerturbArgs),
    /// Single-sample targeted fine-tuning sweep with nearest-neighbor effects
    ExpFinetune(FinetuneArgs),
    /// Salient versus random pixel masking over misclassified samples
    ExpMask(MaskArgs),
    /// Input-space saliency map of one sample
    InputSaliency(InputSaliencyArgs),
    /// Cascading model randomization check of input-space saliency
    SanityCheck(SanityArgs),
    /// Serve the HTTP API
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct ModelData {
    /// Model checkpoint (.psal)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest written by prepare-data
    #[arg(long)]
    pub dataset: PathBuf,
    /// Split to read samples from (train, val, holdout)
    #[arg(long, default_value = "val")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Manifest with a `source` and optional `split`; omitted means the default synthetic set
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Completed manifest
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest written by prepare-data
    #[arg(long)]
    pub dataset: PathBuf,
    /// Training configuration JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model specification JSON; omitted means a small residual network
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Stage widths of the default residual network
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub widths: Vec<usize>,
    /// Overrides the configured number of epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed of initialization and batch order (overrides the configuration)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-epoch metrics CSV
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: ModelData,
    /// Per-sample predictions CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    pub input: ModelData,
    /// Statistics JSON
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    /// Gradient magnitude
    Gradient,
    /// Gradient magnitude averaged over noisy inputs
    Smoothgrad,
    /// Weight displacement of a small L2 attack on the parameters
    Adversarial,
    /// One step of the L1-regularized parameter attack
    L1Adversarial,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub input: ModelData,
    /// Profile statistics from `stats`
    #[arg(long)]
    pub stats: PathBuf,
    /// One sample id; omitted means every sample of the split
    #[arg(long)]
    pub sample: Option<usize>,
    /// Saliency variant for a single sample
    #[arg(long, value_enum, default_value = "gradient")]
    pub variant: Variant,
    /// Seed of the smoothgrad noise
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-layer sorted CSV of the single-sample profile
    #[arg(long)]
    pub sorted_out: Option<PathBuf>,
    /// Index manifest (.jsonl) for a split, or a CSV for one sample
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    All,
    Misclassified,
    Correct,
}

#[derive(Args, Debug)]
pub struct KnnArgs {
    /// Index manifest written by `profile`
    #[arg(long)]
    pub index: PathBuf,
    /// Sample id of the query
    #[arg(long)]
    pub sample: usize,
    /// Number of neighbors
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Which samples may be returned
    #[arg(long, value_enum, default_value = "all")]
    pub pool: PoolArg,
    /// Inclusive layer range a..b (or one layer a)
    #[arg(long)]
    pub layers: Option<String>,
    /// Neighbors CSV; standard output when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentData {
    #[command(flatten)]
    pub input: ModelData,
    /// Profile statistics from `stats`
    #[arg(long)]
    pub stats: PathBuf,
    /// Experiment configuration JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use at most this many pool samples
    #[arg(long)]
    pub limit: Option<usize>,
    /// Report CSV; the JSON report is written next to it
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepCounts {
    /// Absolute filter counts (override the configuration)
    #[arg(long, value_delimiter = ',', conflicts_with = "percents")]
    pub counts: Option<Vec<usize>>,
    /// Filter counts as percentages of all filters
    #[arg(long, value_delimiter = ',')]
    pub percents: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[command(flatten)]
    pub exp: ExperimentData,
    #[command(flatten)]
    pub counts: SweepCounts,
    /// Run on correctly classified samples instead of misclassified ones
    #[arg(long)]
    pub correct: bool,
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub exp: ExperimentData,
    #[command(flatten)]
    pub counts: SweepCounts,
    /// Run on correctly classified samples instead of misclassified ones
    #[arg(long)]
    pub correct: bool,
    /// Standard deviation of the added Gaussian noise
    #[arg(long, default_value_t = 1e-3)]
    pub noise_std: f64,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub exp: ExperimentData,
    #[command(flatten)]
    pub counts: SweepCounts,
    /// Overrides the configured step size
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Permit counts above the default fine-tuning cap
    #[arg(long)]
    pub allow_over_cap: bool,
    /// Split whose misclassified samples form the neighbor pool
    #[arg(long, default_value = "holdout")]
    pub neighbor_split: String,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    #[command(flatten)]
    pub exp: ExperimentData,
    /// Overrides the configured masked percentage
    #[arg(long)]
    pub percent: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BoostArgs {
    /// Number of most salient filters boosted
    #[arg(long, default_value_t = 10)]
    pub top_filters: usize,
    /// Boost factor
    #[arg(long, default_value_t = 100.0)]
    pub boost: f64,
    /// Explicit filter set (overrides --top-filters)
    #[arg(long, value_delimiter = ',')]
    pub filters: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct InputSaliencyArgs {
    #[command(flatten)]
    pub input: ModelData,
    /// Profile statistics from `stats`
    #[arg(long)]
    pub stats: PathBuf,
    /// Sample id as listed by `eval`
    #[arg(long)]
    pub sample: usize,
    #[command(flatten)]
    pub boost: BoostArgs,
    /// Skip thresholding and blurring
    #[arg(long)]
    pub raw: bool,
    /// Map CSV (row, col, value)
    #[arg(long)]
    pub out: PathBuf,
    /// Heat-map overlay PNG
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SanityArgs {
    #[command(flatten)]
    pub input: ModelData,
    #[command(flatten)]
    pub boost: BoostArgs,
    /// Misclassified samples evaluated
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    /// Leading samples of the split used to recompute profile statistics
    #[arg(long, default_value_t = 16)]
    pub reference: usize,
    /// Independent randomization draws per sample
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Seed of the randomization draws
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV; the JSON report is written next to it
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Service configuration JSON; flags override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Listening port
    #[arg(long)]
    pub port: Option<u16>,
    /// Model checkpoint (.psal)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest written by prepare-data
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Profile statistics from `stats`
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Profile index manifest written by `profile`
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Bind address
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return 2;
        }
    }
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
