//! Recovery and entropy experiments, and the dataset-fraction sweep.
//!
//! Every random choice is drawn from a stream derived from the run seed and
//! the item's coordinates (split, level, sequence index), so results are
//! identical for any worker count.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{dataset_fraction, Dataset, FractionSchedule};
use crate::denoiser::{self, CoupledLogitsDenoiser, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::metrics::{self, EntropyGap, EntropyReport, RecoveryResult};
use crate::seed;
use crate::uddm::{self, Denoiser, DiffusionSchedule, FinalStep, SampleMode, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub fraction: f64,
    /// Corruption level (experiment 1) or diffusion time (experiment 2).
    pub level: f64,
    pub split: Split,
    pub mode: SampleMode,
    /// Mean over sequences with at least one corrupted position; `None` if there were none.
    pub corrupted_rate: Option<f64>,
    pub total_rate: f64,
    pub n_sequences: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecoveryCurve {
    pub rows: Vec<CurveRow>,
}

pub const CURVE_HEADER: &str = "fraction,level,split,mode,corrupted_rate,total_rate,n_sequences,seed";

impl RecoveryCurve {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CURVE_HEADER}\n");
        for r in &self.rows {
            let corrupted = r.corrupted_rate.map_or_else(|| "undefined".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{corrupted},{},{},{}",
                r.fraction, r.level, r.split, r.mode, r.total_rate, r.n_sequences, r.seed
            );
        }
        out
    }

    pub fn find(&self, level: f64, split: Split, mode: SampleMode) -> Option<&CurveRow> {
        self.rows.iter().find(|r| (r.level - level).abs() < 1e-12 && r.split == split && r.mode == mode)
    }
}

/// Sequences evaluated per split, plus the fraction label carried into curve rows.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub train: &'a [TokenSequence],
    pub test: &'a [TokenSequence],
    pub fraction: f64,
}

impl EvalSets<'_> {
    fn splits(&self) -> [(Split, &[TokenSequence]); 2] {
        [(Split::Train, self.train), (Split::Test, self.test)]
    }
}

fn summarize(results: &[RecoveryResult]) -> (Option<f64>, f64) {
    let defined: Vec<f64> = results.iter().filter_map(|r| r.corrupted_rate).collect();
    let corrupted = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let total = results.iter().map(|r| r.total_rate).sum::<f64>() / results.len().max(1) as f64;
    (corrupted, total)
}

/// `ceil(level * L)` distinct positions, each moved to a uniformly chosen different category.
pub fn corrupt_positions<R: Rng + ?Sized>(x: &TokenSequence, level: f64, rng: &mut R) -> (TokenSequence, Vec<bool>) {
    let len = x.len();
    let k = x.vocab_size();
    let count = ((level * len as f64 - 1e-9).ceil().max(0.0) as usize).min(len);
    let mut tokens = x.tokens().to_vec();
    let mut mask = vec![false; len];
    for pos in sample(rng, len, count) {
        tokens[pos] = (tokens[pos] + 1 + rng.random_range(0..k - 1)) % k;
        mask[pos] = true;
    }
    (TokenSequence::new(tokens, k).expect("tokens stay in range"), mask)
}

fn item_seed(seed: u64, split: Split, level_index: usize, sequence: usize) -> u64 {
    seed::derive(seed::derive(seed::derive(seed, "split", split.index()), "level", level_index as u64), "sequence", sequence as u64)
}

/// Corrupts exactly `ceil(level * L)` positions and denoises greedily from `reverse_start_t`.
pub fn exp1_deterministic<D: Denoiser + ?Sized>(
    model: &D,
    sets: EvalSets<'_>,
    corruption_grid: &[f64],
    reverse_start_t: f64,
    num_steps: usize,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<RecoveryCurve> {
    if let Some(bad) = corruption_grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidArgument(format!("corruption level {bad} outside [0, 1]")));
    }
    let mut rows = Vec::new();
    for (split, seqs) in sets.splits() {
        for (li, &level) in corruption_grid.iter().enumerate() {
            let results = seqs
                .par_iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut rng = seed::stream(item_seed(seed, split, li, i), "exp1", 0);
                    let (z, mask) = corrupt_positions(x, level, &mut rng);
                    let out = uddm::reverse_sample(model, &z, reverse_start_t, num_steps, schedule, SampleMode::Greedy, &mut rng)?;
                    metrics::recovery(x, &out, &mask)
                })
                .collect::<Result<Vec<_>>>()?;
            let (corrupted_rate, total_rate) = summarize(&results);
            rows.push(CurveRow {
                fraction: sets.fraction,
                level,
                split,
                mode: SampleMode::Greedy,
                corrupted_rate,
                total_rate,
                n_sequences: seqs.len(),
                seed,
            });
        }
    }
    Ok(RecoveryCurve { rows })
}

/// Corrupts with the forward process at each `t` and runs the stochastic reverse process back to `epsilon`.
pub fn exp2_stochastic<D: Denoiser + ?Sized>(
    model: &D,
    sets: EvalSets<'_>,
    t_grid: &[f64],
    num_steps: usize,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<RecoveryCurve> {
    if let Some(bad) = t_grid.iter().find(|t| !(**t > schedule.epsilon && **t <= 1.0)) {
        return Err(Error::TimeOutOfRange { t: *bad, lo: schedule.epsilon, hi: 1.0 });
    }
    let mut rows = Vec::new();
    for (split, seqs) in sets.splits() {
        for (ti, &t) in t_grid.iter().enumerate() {
            let results = seqs
                .par_iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut rng = seed::stream(item_seed(seed, split, ti, i), "exp2", 0);
                    let (z, mask) = uddm::forward_corrupt(x, t, schedule, &mut rng)?;
                    let out = uddm::reverse_sample(model, &z, t, num_steps, schedule, SampleMode::Stochastic, &mut rng)?;
                    metrics::recovery(x, &out, &mask)
                })
                .collect::<Result<Vec<_>>>()?;
            let (corrupted_rate, total_rate) = summarize(&results);
            rows.push(CurveRow {
                fraction: sets.fraction,
                level: t,
                split,
                mode: SampleMode::Stochastic,
                corrupted_rate,
                total_rate,
                n_sequences: seqs.len(),
                seed,
            });
        }
    }
    Ok(RecoveryCurve { rows })
}

/// `{0.1, 0.2, ..., 1.0}` together with `{0.25, 0.5, 0.75}`, sorted.
pub fn default_t_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (1..=10).map(|i| f64::from(i) / 10.0).chain([0.25, 0.5, 0.75]).collect();
    grid.sort_by(f64::total_cmp);
    grid
}

/// `{0.1, 0.2, ..., 1.0}`.
pub fn default_corruption_grid() -> Vec<f64> {
    (1..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeOutcome {
    pub samples: Vec<TokenSequence>,
    pub train: EntropyReport,
    pub synth: EntropyReport,
    pub gap: EntropyGap,
}

fn entropy_rows<D: Denoiser + ?Sized>(
    model: &D,
    seqs: &[TokenSequence],
    eval_t: f64,
    schedule: &DiffusionSchedule,
    seed: u64,
    label: &str,
) -> Result<Vec<Vec<f64>>> {
    seqs.par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = seed::stream(seed, label, i as u64);
            let (z, _) = uddm::forward_corrupt(x, eval_t, schedule, &mut rng)?;
            Ok(metrics::sequence_entropy(model, &z, eval_t, schedule)?.0)
        })
        .collect()
}

/// Generates `n_samples` sequences from uniform noise at `t = 1` and compares
/// the conditional entropies (at `eval_t`, after forward noise to `eval_t`) of
/// the training sequences and the generated ones.
#[allow(clippy::too_many_arguments)]
pub fn exp3_generative<D: Denoiser + ?Sized>(
    model: &D,
    train: &[TokenSequence],
    n_samples: usize,
    eval_t: f64,
    num_steps: usize,
    final_step: FinalStep,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<GenerativeOutcome> {
    if n_samples == 0 || train.is_empty() {
        return Err(Error::InvalidArgument("experiment 3 needs at least one sample and one training sequence".into()));
    }
    schedule.check_time(eval_t)?;
    let (l, k) = (model.seq_len(), model.vocab_size());
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(seed, "exp3-sample", i as u64);
            let start = TokenSequence::uniform_random(l, k, &mut rng)?;
            uddm::reverse_sample_with(model, &start, 1.0, num_steps, schedule, SampleMode::Stochastic, final_step, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let max_value = l as f64 * (k as f64).ln() + metrics::ENTROPY_BIN_WIDTH;
    let train_report = EntropyReport::from_token_entropies(entropy_rows(model, train, eval_t, schedule, seed, "exp3-train")?, max_value);
    let synth_report = EntropyReport::from_token_entropies(entropy_rows(model, &samples, eval_t, schedule, seed, "exp3-synth")?, max_value);
    let gap = metrics::entropy_gap(&train_report.per_sequence, &synth_report.per_sequence)?;
    Ok(GenerativeOutcome { samples, train: train_report, synth: synth_report, gap })
}

/// Smallest fraction from which `|train - test| <= tol` holds for every larger fraction.
pub fn detect_transition(points: &[(f64, f64, f64)], tol: f64) -> Option<f64> {
    let mut candidate = None;
    for &(fraction, train, test) in points.iter().rev() {
        if (train - test).abs() <= tol {
            candidate = Some(fraction);
        } else {
            break;
        }
    }
    candidate
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExperimentSelection {
    pub exp1: bool,
    pub exp2: bool,
    pub exp3: bool,
}

impl Default for ExperimentSelection {
    fn default() -> Self {
        Self { exp1: false, exp2: true, exp3: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub fractions: FractionSchedule,
    /// Per-fraction training settings; the seed field is replaced by a derived one.
    pub train: TrainConfig,
    /// Fixed SGD step budget per fraction, converted to epochs; `None` keeps `train.epochs`.
    pub train_steps: Option<usize>,
    pub experiments: ExperimentSelection,
    pub base_seed: u64,
    pub corruption_grid: Vec<f64>,
    pub exp1_start_t: f64,
    pub t_grid: Vec<f64>,
    pub num_steps: usize,
    pub n_samples: usize,
    pub final_step: FinalStep,
    pub eval_t: f64,
    pub reference_t: f64,
    pub transition_tol: f64,
    pub max_train_eval: usize,
    pub max_test_eval: usize,
    pub workers: usize,
}

impl SweepConfig {
    /// Defaults sized for the archetype corpus: 10000 SGD steps per fraction
    /// at learning rate 0.1 with gradient norms clipped to 5.
    pub fn new(fractions: FractionSchedule) -> Self {
        let train = TrainConfig { learning_rate: 0.1, max_grad_norm: 5.0, eval_every: 0, ..TrainConfig::default() };
        Self {
            fractions,
            train,
            train_steps: Some(10_000),
            experiments: ExperimentSelection::default(),
            base_seed: 0,
            corruption_grid: default_corruption_grid(),
            exp1_start_t: 1.0,
            t_grid: default_t_grid(),
            num_steps: 100,
            n_samples: 128,
            final_step: FinalStep::PredictionArgmax,
            eval_t: train.schedule.epsilon,
            reference_t: 0.5,
            transition_tol: 0.05,
            max_train_eval: 256,
            max_test_eval: 128,
            workers: 1,
        }
    }

    /// Epochs giving at least `train_steps` SGD steps for `n_train` sequences.
    pub fn epochs_for(&self, n_train: usize) -> usize {
        match self.train_steps {
            Some(steps) => steps.div_ceil(n_train.div_ceil(self.train.batch_size.max(1))).max(1),
            None => self.train.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FractionStatus {
    Ok,
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRow {
    pub fraction: f64,
    pub n_train: usize,
    pub status: FractionStatus,
    pub train_recovery: Option<f64>,
    pub test_recovery: Option<f64>,
    pub train_entropy: Option<f64>,
    pub synth_entropy: Option<f64>,
    pub train_token_entropy: Option<f64>,
    pub entropy_gap: Option<f64>,
    pub ks_statistic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionReport {
    pub rows: Vec<TransitionRow>,
    pub detected_transition_fraction: Option<f64>,
}

impl TransitionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "fraction,n_train,status,train_recovery,test_recovery,train_entropy,synth_entropy,train_token_entropy,entropy_gap,ks_statistic\n",
        );
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for r in &self.rows {
            let status = match &r.status {
                FractionStatus::Ok => "ok".to_string(),
                FractionStatus::Skipped(reason) => format!("skipped: {}", reason.replace([',', '\n'], ";")),
            };
            let _ = writeln!(
                out,
                "{},{},{status},{},{},{},{},{},{},{}",
                r.fraction,
                r.n_train,
                opt(r.train_recovery),
                opt(r.test_recovery),
                opt(r.train_entropy),
                opt(r.synth_entropy),
                opt(r.train_token_entropy),
                opt(r.entropy_gap),
                opt(r.ks_statistic)
            );
        }
        out
    }

    /// `(fraction, train, test)` reference recoveries of the rows that have both.
    pub fn recovery_points(&self) -> Vec<(f64, f64, f64)> {
        self.rows.iter().filter_map(|r| Some((r.fraction, r.train_recovery?, r.test_recovery?))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionOutcome {
    pub row: TransitionRow,
    pub curves: RecoveryCurve,
    pub entropy: Option<GenerativeOutcome>,
    pub model: Option<CoupledLogitsDenoiser>,
    pub log: Option<TrainLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub report: TransitionReport,
    pub fractions: Vec<FractionOutcome>,
}

impl SweepOutcome {
    pub fn curves(&self) -> RecoveryCurve {
        RecoveryCurve { rows: self.fractions.iter().flat_map(|f| f.curves.rows.iter().copied()).collect() }
    }

    fn entropy_csv(&self, pick: impl Fn(&GenerativeOutcome) -> &EntropyReport) -> String {
        let mut out = String::from("fraction,index,sequence_entropy,mean_token_entropy\n");
        for f in &self.fractions {
            if let Some(e) = &f.entropy {
                let report = pick(e);
                for (i, (total, row)) in report.per_sequence.iter().zip(&report.per_token).enumerate() {
                    let _ = writeln!(out, "{},{i},{total},{}", f.row.fraction, total / row.len() as f64);
                }
            }
        }
        out
    }

    /// Writes `curves.csv`, `entropy_train.csv`, `entropy_synth.csv`,
    /// `transition.csv` and `checkpoints/frac_<fraction>.bin` under `dir`.
    pub fn write_run_dir(&self, dir: &Path) -> Result<()> {
        let ckpt = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
        };
        write("curves.csv", self.curves().to_csv())?;
        write("entropy_train.csv", self.entropy_csv(|e| &e.train))?;
        write("entropy_synth.csv", self.entropy_csv(|e| &e.synth))?;
        write("transition.csv", self.report.to_csv())?;
        let detected = self.report.detected_transition_fraction.map_or_else(|| "none".to_string(), |f| f.to_string());
        write("detected_transition.txt", format!("{detected}\n"))?;
        for f in &self.fractions {
            if let Some(m) = &f.model {
                m.save_checkpoint(&ckpt.join(format!("frac_{}.bin", f.row.fraction)))?;
            }
        }
        Ok(())
    }
}

fn run_fraction(dataset: &Dataset, config: &SweepConfig, index: usize, fraction: f64) -> Result<FractionOutcome> {
    let fraction_seed = seed::derive(config.base_seed, "fraction", index as u64);
    let subset = dataset_fraction(dataset, fraction, seed::derive(config.base_seed, "fraction-permutation", 0))?;
    let n_train = subset.train.len();
    let train_config = TrainConfig { seed: seed::derive(fraction_seed, "train", 0), epochs: config.epochs_for(n_train), ..config.train };
    let empty_row = |status| TransitionRow {
        fraction,
        n_train,
        status,
        train_recovery: None,
        test_recovery: None,
        train_entropy: None,
        synth_entropy: None,
        train_token_entropy: None,
        entropy_gap: None,
        ks_statistic: None,
    };
    let (model, log) = match denoiser::train(&subset, &train_config) {
        Ok(out) => out,
        Err(e @ (Error::Diverged { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteKl(_))) => {
            return Ok(FractionOutcome {
                row: empty_row(FractionStatus::Skipped(e.to_string())),
                curves: RecoveryCurve::default(),
                entropy: None,
                model: None,
                log: None,
            })
        }
        Err(e) => return Err(e),
    };
    let schedule = &config.train.schedule;
    let sets = EvalSets {
        train: &subset.train[..n_train.min(config.max_train_eval)],
        test: &subset.test[..subset.test.len().min(config.max_test_eval)],
        fraction,
    };
    let mut curves = RecoveryCurve::default();
    if config.experiments.exp1 {
        let c = exp1_deterministic(
            &model,
            sets,
            &config.corruption_grid,
            config.exp1_start_t,
            config.num_steps,
            schedule,
            seed::derive(fraction_seed, "exp1", 0),
        )?;
        curves.rows.extend(c.rows);
    }
    let mut row = empty_row(FractionStatus::Ok);
    if config.experiments.exp2 {
        let c = exp2_stochastic(&model, sets, &config.t_grid, config.num_steps, schedule, seed::derive(fraction_seed, "exp2", 0))?;
        let reference = |split| c.find(config.reference_t, split, SampleMode::Stochastic).and_then(|r| r.corrupted_rate);
        row.train_recovery = reference(Split::Train);
        row.test_recovery = reference(Split::Test);
        curves.rows.extend(c.rows);
    }
    let entropy = if config.experiments.exp3 {
        let e = exp3_generative(
            &model,
            sets.train,
            config.n_samples,
            config.eval_t,
            config.num_steps,
            config.final_step,
            schedule,
            seed::derive(fraction_seed, "exp3", 0),
        )?;
        row.train_entropy = Some(e.train.mean);
        row.synth_entropy = Some(e.synth.mean);
        row.train_token_entropy = Some(e.train.mean_per_token());
        row.entropy_gap = Some(e.gap.mean_gap);
        row.ks_statistic = Some(e.gap.ks_statistic);
        Some(e)
    } else {
        None
    };
    Ok(FractionOutcome { row, curves, entropy, model: Some(model), log: Some(log) })
}

/// Trains one model per fraction (in parallel on `workers` threads) and runs
/// the selected experiments on each. Divergent fractions are recorded as
/// skipped; results are ordered by fraction.
pub fn sweep(dataset: &Dataset, config: &SweepConfig) -> Result<SweepOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let fractions = pool.install(|| {
        config
            .fractions
            .fractions()
            .par_iter()
            .enumerate()
            .map(|(i, &f)| run_fraction(dataset, config, i, f))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<TransitionRow> = fractions.iter().map(|f| f.row.clone()).collect();
    let mut report = TransitionReport { rows, detected_transition_fraction: None };
    report.detected_transition_fraction = detect_transition(&report.recovery_points(), config.transition_tol);
    Ok(SweepOutcome { report, fractions })
}
