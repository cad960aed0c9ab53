use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ddam_core::{FinalStep, ScheduleKind};

pub const DEFAULT_CORRUPTION_GRID: &str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1";
pub const DEFAULT_T_GRID: &str = "0.1,0.2,0.25,0.3,0.4,0.5,0.6,0.7,0.75,0.8,0.9,1";
pub const DEFAULT_DUALITY_GRID: &str = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

/// Laboratory for uniform-state discrete diffusion models and
/// pseudo-likelihood associative memories.
///
/// Every subcommand takes `--config FILE` with `key = value` lines (keys are
/// long flag names); command-line flags override the file.
#[derive(Debug, Parser)]
#[command(name = "ddam", version)]
pub struct Cli {
    /// Flat `key = value` file supplying defaults for the chosen subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = default_workers(), value_parser = positive)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a pseudo-likelihood associative memory and probe margins and basins.
    Am(AmArgs),
    /// Generate or ingest a dataset, or print the default fraction schedule.
    Data(DataArgs),
    /// Train a coupled-logits denoiser.
    Train(TrainArgs),
    /// Greedy recovery from exact corruption levels.
    Exp1(Exp1Args),
    /// Stochastic recovery from forward-process corruption.
    Exp2(Exp2Args),
    /// Generation and train-vs-synthetic conditional entropies.
    Exp3(Exp3Args),
    /// Dataset-fraction sweep: one model per fraction plus experiments.
    Sweep(SweepArgs),
    /// Cross-check the Gaussian-to-categorical transformation by sampling.
    DualityVerify(DualityArgs),
    /// Compare two routes to the Gaussian entropy of a Hessian.
    LaplaceCheck(LaplaceArgs),
    /// Compare the literal closed-form reverse posterior with the Bayes product.
    PosteriorCheck(PosteriorArgs),
}

pub fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

pub fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(_) => Err("must be positive and finite".into()),
        Err(e) => Err(e.to_string()),
    }
}

pub fn probability(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        Ok(_) => Err("must lie in [0, 1]".into()),
        Err(e) => Err(e.to_string()),
    }
}

/// Comma-separated reals.
#[derive(Debug, Clone, PartialEq)]
pub struct RealList(pub Vec<f64>);

pub fn real_list(s: &str) -> Result<RealList, String> {
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err("values must be finite".into());
    }
    Ok(RealList(values))
}

/// Rows separated by `;`, entries by `,`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix(pub Vec<Vec<f64>>);

pub fn real_matrix(s: &str) -> Result<RealMatrix, String> {
    let rows = s.split(';').map(|row| real_list(row).map(|r| r.0)).collect::<Result<Vec<_>, _>>()?;
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err("rows must have equal length".into());
    }
    Ok(RealMatrix(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Experiments {
    pub exp1: bool,
    pub exp2: bool,
    pub exp3: bool,
}

pub fn experiments(s: &str) -> Result<Experiments, String> {
    let mut e = Experiments { exp1: false, exp2: false, exp3: false };
    for name in s.split(',').map(str::trim) {
        match name {
            "exp1" => e.exp1 = true,
            "exp2" => e.exp2 = true,
            "exp3" => e.exp3 = true,
            other => return Err(format!("unknown experiment {other:?}; expected exp1, exp2 or exp3")),
        }
    }
    Ok(e)
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    /// Noise schedule: linear or cosine.
    #[arg(long, default_value = "linear")]
    pub schedule: ScheduleKind,
    /// Slope c of the inverse temperature 1 + c * alpha(t).
    #[arg(long, default_value_t = 4.0)]
    pub beta_slope: f64,
    /// Terminal time.
    #[arg(long, default_value_t = 1e-5, value_parser = positive_f64)]
    pub epsilon: f64,
}

#[derive(Debug, Clone, Args)]
pub struct AmArgs {
    /// Pattern length.
    #[arg(long = "L", default_value_t = 64, value_parser = positive)]
    pub l: usize,
    /// Number of random patterns.
    #[arg(long = "P", default_value_t = 6, value_parser = positive)]
    pub p: usize,
    /// Pattern file (one pattern per line of `+`/`-` or `1`/`-1`); overrides --L and --P.
    #[arg(long)]
    pub patterns: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 10_000, value_parser = positive)]
    pub epochs: usize,
    /// Stop once consecutive losses differ by less than this.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Retrievals per flip level in the basin probe.
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(args_conflicts_with_subcommands = true)]
pub struct DataArgs {
    /// Print a fraction schedule as CSV (`default` is the only schedule).
    #[arg(long)]
    pub fraction_schedule: Option<String>,
    /// Keep this many evenly spaced points of the schedule.
    #[arg(long, value_parser = positive)]
    pub truncate: Option<usize>,
    #[command(subcommand)]
    pub command: Option<DataCommand>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum DataCommand {
    /// Noisy copies of random template sequences.
    GenArchetype(ArchetypeArgs),
    /// Sequences from a first-order Markov chain.
    GenMarkov(MarkovArgs),
    /// Character-level blocks of a text file.
    Ingest(IngestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ArchetypeArgs {
    /// Number of templates.
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub archetypes: usize,
    #[arg(long = "L", default_value_t = 16, value_parser = positive)]
    pub l: usize,
    #[arg(long = "K", default_value_t = 16, value_parser = positive)]
    pub k: usize,
    #[arg(long, default_value_t = 512, value_parser = positive)]
    pub n_train: usize,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub n_test: usize,
    /// Per-token resampling probability.
    #[arg(long, default_value_t = 0.1, value_parser = probability)]
    pub resample_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MarkovArgs {
    /// Transition matrix, rows separated by `;`, e.g. `0.9,0.1;0.2,0.8`.
    #[arg(long, value_parser = real_matrix)]
    pub transition: RealMatrix,
    #[arg(long = "L", default_value_t = 16, value_parser = positive)]
    pub l: usize,
    #[arg(long, default_value_t = 512, value_parser = positive)]
    pub n_train: usize,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Text file to tokenize.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "L", default_value_t = 32, value_parser = positive)]
    pub l: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset file.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub batch_size: usize,
    /// Evaluate the held-out NELBO every this many epochs (0 disables).
    #[arg(long, default_value_t = 5)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    pub eval_sequences: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    pub eval_time_samples: usize,
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub eval_grid_steps: usize,
    /// Clip batch gradients to this Euclidean norm.
    #[arg(long, default_value_t = 5.0, value_parser = positive_f64)]
    pub max_grad_norm: f64,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Last epoch already completed by --init; training resumes at the next one.
    #[arg(long, default_value_t = 0)]
    pub start_epoch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Denoiser checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training sequences evaluated (prefix of the split).
    #[arg(long, default_value_t = 256, value_parser = positive)]
    pub max_train_eval: usize,
    /// Test sequences evaluated (prefix of the split).
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub max_test_eval: usize,
    /// Reverse-process steps.
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub num_steps: usize,
    /// Fraction label written into curves.csv.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct Exp1Args {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Fractions of positions moved to a different category.
    #[arg(long, default_value = DEFAULT_CORRUPTION_GRID, value_parser = real_list)]
    pub corruption_grid: RealList,
    /// Time from which the greedy reverse process starts.
    #[arg(long, default_value_t = 1.0)]
    pub reverse_start_t: f64,
}

#[derive(Debug, Clone, Args)]
pub struct Exp2Args {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Corruption times.
    #[arg(long, default_value = DEFAULT_T_GRID, value_parser = real_list)]
    pub t_grid: RealList,
}

#[derive(Debug, Clone, Args)]
pub struct Exp3Args {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub n_samples: usize,
    /// Time at which conditional entropies are measured.
    #[arg(long, default_value_t = 1e-5)]
    pub eval_t: f64,
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub num_steps: usize,
    /// Final sampler step: `argmax` of the prediction at the terminal time, or `keep`.
    #[arg(long, default_value = "argmax")]
    pub final_step: FinalStep,
    #[arg(long, default_value_t = 256, value_parser = positive)]
    pub max_train_eval: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Dataset file; without it an archetype corpus is generated from the seed.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub archetypes: usize,
    #[arg(long = "L", default_value_t = 16, value_parser = positive)]
    pub l: usize,
    #[arg(long = "K", default_value_t = 16, value_parser = positive)]
    pub k: usize,
    #[arg(long, default_value_t = 512, value_parser = positive)]
    pub n_train: usize,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0.1, value_parser = probability)]
    pub resample_prob: f64,
    /// `default` or a comma-separated list ending in 1.
    #[arg(long, default_value = "default")]
    pub fractions: String,
    /// Keep this many evenly spaced fractions.
    #[arg(long, value_parser = positive)]
    pub truncate: Option<usize>,
    /// SGD steps per fraction.
    #[arg(long, default_value_t = 10_000, value_parser = positive)]
    pub train_steps: usize,
    #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5.0, value_parser = positive_f64)]
    pub max_grad_norm: f64,
    /// Experiments to run per fraction.
    #[arg(long, default_value = "exp2,exp3", value_parser = experiments)]
    pub experiments: Experiments,
    #[arg(long, default_value = DEFAULT_CORRUPTION_GRID, value_parser = real_list)]
    pub corruption_grid: RealList,
    #[arg(long, default_value_t = 1.0)]
    pub reverse_start_t: f64,
    #[arg(long, default_value = DEFAULT_T_GRID, value_parser = real_list)]
    pub t_grid: RealList,
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub num_steps: usize,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub n_samples: usize,
    #[arg(long, default_value = "argmax")]
    pub final_step: FinalStep,
    #[arg(long, default_value_t = 1e-5)]
    pub eval_t: f64,
    /// Corruption time whose stochastic recovery defines the transition.
    #[arg(long, default_value_t = 0.5)]
    pub reference_t: f64,
    #[arg(long, default_value_t = 0.05, value_parser = positive_f64)]
    pub transition_tol: f64,
    #[arg(long, default_value_t = 256, value_parser = positive)]
    pub max_train_eval: usize,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub max_test_eval: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DualityArgs {
    /// Vocabulary sizes, comma-separated.
    #[arg(long = "K", default_value = "2")]
    pub k: String,
    /// Gaussian parameters in [0, 1).
    #[arg(long, default_value = DEFAULT_DUALITY_GRID, value_parser = real_list)]
    pub grid: RealList,
    /// Monte-Carlo draws per grid point.
    #[arg(long, default_value_t = 1_000_000, value_parser = positive)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct LaplaceArgs {
    /// Hessian to check, rows separated by `;`; without it random ones are drawn.
    #[arg(long, value_parser = real_matrix)]
    pub hessian: Option<RealMatrix>,
    /// Number of random positive-definite Hessians.
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub random: usize,
    #[arg(long, default_value_t = 6, value_parser = positive)]
    pub max_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PosteriorArgs {
    #[arg(long = "K", default_value_t = 2, value_parser = positive)]
    pub k: usize,
    #[arg(long, default_value_t = 0.8)]
    pub alpha_s: f64,
    #[arg(long, default_value_t = 0.4)]
    pub alpha_t: f64,
    /// Clean category.
    #[arg(long, default_value_t = 0)]
    pub x: usize,
    /// Noisy category at time t.
    #[arg(long, default_value_t = 0)]
    pub z_t: usize,
    #[arg(long)]
    pub out: PathBuf,
}
