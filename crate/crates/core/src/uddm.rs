//! Uniform-state discrete diffusion.
//!
//! Each token is corrupted independently by `q(z_t | x) = Cat(alpha_t onehot(x) + (1 - alpha_t) / K)`.
//! The exact reverse posterior `q(z_s | z_t, x)` is computed as the normalised
//! product of the `s -> t` transition and the `0 -> s` marginal; the model
//! posterior plugs the denoiser's `x`-prediction into it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    vocab_size: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidArgument(format!("vocabulary size {vocab_size} must be at least 2")));
        }
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("token sequences must be non-empty".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary of size {vocab_size}")));
        }
        Ok(Self { tokens, vocab_size })
    }

    pub fn uniform_random<R: Rng + ?Sized>(len: usize, vocab_size: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..len).map(|_| rng.random_range(0..vocab_size.max(1))).collect(), vocab_size)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Copy with one position replaced.
    pub fn with_token(&self, position: usize, token: usize) -> Result<Self> {
        if position >= self.len() {
            return Err(Error::IndexOutOfRange { index: position, len: self.len() });
        }
        let mut tokens = self.tokens.clone();
        tokens[position] = token;
        Self::new(tokens, self.vocab_size)
    }
}

const SUM_TOLERANCE: f64 = 1e-9;

/// A categorical distribution over `K` categories.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// Validates nonnegative finite entries summing to one (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no categories".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution("entries must be finite and nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalises nonnegative weights.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidDistribution(format!("cannot normalise weights with sum {sum}")));
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(Self { probs: weights })
    }

    pub fn uniform(k: usize) -> Self {
        Self { probs: vec![1.0 / k as f64; k] }
    }

    pub fn one_hot(index: usize, k: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable category; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, p) in self.probs.iter().enumerate().skip(1) {
            if *p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (k, p) in self.probs.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                last = k;
                if u < acc {
                    return k;
                }
            }
        }
        last
    }
}

/// Numerically stable `softmax(scale * logits)`.
pub fn softmax(logits: &[f64], scale: f64) -> CategoricalDist {
    let max = logits.iter().map(|l| scale * l).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (scale * l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    CategoricalDist { probs: weights.into_iter().map(|w| w / sum).collect() }
}

/// `KL(q || p)` in nats; an error when `p` has a zero where `q` has mass.
pub fn kl_divergence(q: &CategoricalDist, p: &CategoricalDist) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::DimensionMismatch { expected: q.len(), found: p.len() });
    }
    let mut kl = 0.0;
    for (k, (qk, pk)) in q.probs.iter().zip(&p.probs).enumerate() {
        if *qk > 0.0 {
            if *pk <= 0.0 {
                return Err(Error::NonFiniteKl(format!("model assigns zero probability to category {k} carrying mass {qk}")));
            }
            kl += qk * (qk / pk).ln();
        }
    }
    if !kl.is_finite() {
        return Err(Error::NonFiniteKl(format!("divergence evaluated to {kl}")));
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown schedule {other:?} (expected linear or cosine)"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

pub const ALPHA_MIN: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 1.0 - 1e-4;
pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_BETA_SLOPE: f64 = 4.0;

/// The noise schedule `t -> alpha(t)` on `[epsilon, 1]` and the inverse
/// temperature `beta(t) = 1 + c * alpha(t)`.
///
/// `alpha` runs from `ALPHA_MAX` at `t = epsilon` down to `ALPHA_MIN` at
/// `t = 1`; the linear schedule is affine in `t`, the cosine one follows
/// `cos^2(pi u / 2)` with `u` the rescaled time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub beta_slope: f64,
    pub epsilon: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, beta_slope: DEFAULT_BETA_SLOPE, epsilon: DEFAULT_EPSILON }
    }
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, beta_slope: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!("terminal time {epsilon} must lie in (0, 1)")));
        }
        if !(beta_slope >= 0.0 && beta_slope.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta slope {beta_slope} must be finite and nonnegative")));
        }
        Ok(Self { kind, beta_slope, epsilon })
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= self.epsilon && t <= 1.0) {
            return Err(Error::TimeOutOfRange { t, lo: self.epsilon, hi: 1.0 });
        }
        Ok(())
    }

    /// `alpha(t)`; `t` is clamped into `[epsilon, 1]`.
    pub fn alpha(&self, t: f64) -> f64 {
        let u = ((t.clamp(self.epsilon, 1.0) - self.epsilon) / (1.0 - self.epsilon)).clamp(0.0, 1.0);
        let shape = match self.kind {
            ScheduleKind::Linear => 1.0 - u,
            ScheduleKind::Cosine => {
                let c = (std::f64::consts::FRAC_PI_2 * u).cos();
                c * c
            }
        };
        ALPHA_MIN + (ALPHA_MAX - ALPHA_MIN) * shape
    }

    pub fn beta(&self, t: f64) -> f64 {
        1.0 + self.beta_slope * self.alpha(t)
    }

    /// Uniform grid of `steps + 1` times from `epsilon` to `t_end` inclusive.
    pub fn time_grid(&self, t_end: f64, steps: usize) -> Vec<f64> {
        (0..=steps)
            .map(|i| {
                if i == steps {
                    t_end
                } else {
                    self.epsilon + (t_end - self.epsilon) * i as f64 / steps as f64
                }
            })
            .collect()
    }
}

/// `alpha onehot(x) + (1 - alpha) / K`.
pub fn marginal_from_alpha(x: usize, vocab_size: usize, alpha: f64) -> CategoricalDist {
    let floor = (1.0 - alpha) / vocab_size as f64;
    let mut probs = vec![floor; vocab_size];
    probs[x] += alpha;
    CategoricalDist { probs }
}

fn check_category(index: usize, vocab_size: usize) -> Result<()> {
    if index >= vocab_size {
        return Err(Error::IndexOutOfRange { index, len: vocab_size });
    }
    Ok(())
}

/// `q(z_t | x)`.
pub fn forward_marginal(x: usize, vocab_size: usize, t: f64, schedule: &DiffusionSchedule) -> Result<CategoricalDist> {
    schedule.check_time(t)?;
    check_category(x, vocab_size)?;
    Ok(marginal_from_alpha(x, vocab_size, schedule.alpha(t)))
}

/// Corrupts every position independently; the mask marks positions whose token changed.
pub fn forward_corrupt<R: Rng + ?Sized>(
    x: &TokenSequence,
    t: f64,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(TokenSequence, Vec<bool>)> {
    schedule.check_time(t)?;
    let alpha = schedule.alpha(t);
    let k = x.vocab_size();
    let tokens: Vec<usize> = x
        .tokens()
        .iter()
        .map(|&tok| {
            // Keep with probability alpha, otherwise redraw uniformly (possibly the same token).
            if rng.random::<f64>() < alpha {
                tok
            } else {
                rng.random_range(0..k)
            }
        })
        .collect();
    let mask = tokens.iter().zip(x.tokens()).map(|(z, x)| z != x).collect();
    Ok((TokenSequence { tokens, vocab_size: k }, mask))
}

/// Reverse posterior `q(z_s | z_t, x)` from the two signal levels, `alpha_s >= alpha_t`.
pub fn posterior_from_alphas(z_t: usize, x: usize, alpha_s: f64, alpha_t: f64, vocab_size: usize) -> Result<CategoricalDist> {
    check_category(z_t, vocab_size)?;
    check_category(x, vocab_size)?;
    if !(alpha_s > 0.0 && alpha_t >= 0.0 && alpha_t <= alpha_s && alpha_s <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= alpha_t <= alpha_s <= 1 with alpha_s > 0, got alpha_s={alpha_s}, alpha_t={alpha_t}"
        )));
    }
    let kf = vocab_size as f64;
    let alpha_ts = alpha_t / alpha_s;
    let weights = (0..vocab_size)
        .map(|zs| {
            let transition = alpha_ts * f64::from(u8::from(zs == z_t)) + (1.0 - alpha_ts) / kf;
            let marginal = alpha_s * f64::from(u8::from(zs == x)) + (1.0 - alpha_s) / kf;
            transition * marginal
        })
        .collect();
    CategoricalDist::from_weights(weights)
}

fn check_pair(s: f64, t: f64, schedule: &DiffusionSchedule) -> Result<()> {
    schedule.check_time(s)?;
    schedule.check_time(t)?;
    if s >= t {
        return Err(Error::InvalidArgument(format!("reverse posterior needs s < t, got s={s}, t={t}")));
    }
    Ok(())
}

/// `q(z_s | z_t, x)` for `epsilon <= s < t <= 1`.
pub fn true_posterior(
    z_t: usize,
    x: usize,
    s: f64,
    t: f64,
    vocab_size: usize,
    schedule: &DiffusionSchedule,
) -> Result<CategoricalDist> {
    check_pair(s, t, schedule)?;
    posterior_from_alphas(z_t, x, schedule.alpha(s), schedule.alpha(t), vocab_size)
}

/// `E_{x ~ x_pred} q(z_s | z_t, x)` from the two signal levels.
///
/// Writing `q(z_s | z_t, x) = A(z_s) B(z_s | x) / N(x)` with `A` the transition,
/// `B` the marginal and `N(x) = q(z_t | x)`, the expectation is
/// `A(z_s) [ (1 - alpha_s)/K sum_x w_x + alpha_s w_{z_s} ]` with `w_x = p_x / N(x)`.
pub fn model_posterior_from_alphas(z_t: usize, x_pred: &CategoricalDist, alpha_s: f64, alpha_t: f64) -> Result<CategoricalDist> {
    let k = x_pred.len();
    check_category(z_t, k)?;
    if !(alpha_s > 0.0 && alpha_t >= 0.0 && alpha_t <= alpha_s && alpha_s <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= alpha_t <= alpha_s <= 1 with alpha_s > 0, got alpha_s={alpha_s}, alpha_t={alpha_t}"
        )));
    }
    let kf = k as f64;
    let alpha_ts = alpha_t / alpha_s;
    let w: Vec<f64> = x_pred
        .probs()
        .iter()
        .enumerate()
        .map(|(x, p)| p / (alpha_t * f64::from(u8::from(x == z_t)) + (1.0 - alpha_t) / kf))
        .collect();
    let w_sum: f64 = w.iter().sum();
    let weights = (0..k)
        .map(|zs| {
            let transition = alpha_ts * f64::from(u8::from(zs == z_t)) + (1.0 - alpha_ts) / kf;
            transition * ((1.0 - alpha_s) / kf * w_sum + alpha_s * w[zs])
        })
        .collect();
    CategoricalDist::from_weights(weights)
}

/// `p_theta(z_s | z_t) = E_{x ~ x_pred} q(z_s | z_t, x)`.
pub fn model_posterior(
    z_t: usize,
    x_pred: &CategoricalDist,
    s: f64,
    t: f64,
    schedule: &DiffusionSchedule,
) -> Result<CategoricalDist> {
    check_pair(s, t, schedule)?;
    model_posterior_from_alphas(z_t, x_pred, schedule.alpha(s), schedule.alpha(t))
}

/// Literal closed-form reverse posterior as it is commonly transcribed:
///
/// `[K a_t z⊙x + (a_ts - a_t) z + (a_s - a_t) x + (1 - a_ts) 1/K] / (K a_t <z,x> + 1 - a_t)`.
///
/// Returned unnormalised so that its normalisation defect can be inspected.
pub fn closed_form_posterior_literal(z_t: usize, x: usize, alpha_s: f64, alpha_t: f64, vocab_size: usize) -> Vec<f64> {
    let kf = vocab_size as f64;
    let alpha_ts = alpha_t / alpha_s;
    let overlap = f64::from(u8::from(z_t == x));
    let denom = kf * alpha_t * overlap + (1.0 - alpha_t);
    (0..vocab_size)
        .map(|k| {
            let zk = f64::from(u8::from(k == z_t));
            let xk = f64::from(u8::from(k == x));
            (kf * alpha_t * zk * xk + (alpha_ts - alpha_t) * zk + (alpha_s - alpha_t) * xk + (1.0 - alpha_ts) / kf) / denom
        })
        .collect()
}

/// Comparison between the literal closed form and the Bayes-product posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDiscrepancy {
    pub bayes: CategoricalDist,
    pub closed_form: Vec<f64>,
    /// Total mass of the literal closed form.
    pub closed_form_mass: f64,
    /// `closed_form_mass - 1`.
    pub normalization_defect: f64,
    /// Largest entrywise gap between the Bayes posterior and the renormalised closed form.
    pub max_abs_diff_normalized: f64,
}

pub fn posterior_discrepancy(z_t: usize, x: usize, alpha_s: f64, alpha_t: f64, vocab_size: usize) -> Result<PosteriorDiscrepancy> {
    let bayes = posterior_from_alphas(z_t, x, alpha_s, alpha_t, vocab_size)?;
    let closed_form = closed_form_posterior_literal(z_t, x, alpha_s, alpha_t, vocab_size);
    let closed_form_mass: f64 = closed_form.iter().sum();
    let max_abs_diff_normalized = closed_form
        .iter()
        .zip(bayes.probs())
        .map(|(c, b)| (c / closed_form_mass - b).abs())
        .fold(0.0, f64::max);
    Ok(PosteriorDiscrepancy {
        bayes,
        closed_form,
        closed_form_mass,
        normalization_defect: closed_form_mass - 1.0,
        max_abs_diff_normalized,
    })
}

/// A model producing per-position logits `f^l(z_t)` over `K` categories.
pub trait Denoiser: Sync {
    fn seq_len(&self) -> usize;

    fn vocab_size(&self) -> usize;

    /// Raw logits, before the schedule's inverse temperature is applied.
    fn logits(&self, z: &TokenSequence, t: f64, schedule: &DiffusionSchedule) -> Result<Vec<Vec<f64>>>;

    /// The `x`-prediction `p_theta(x^l | z_t)` used by sampling, the NELBO and
    /// entropy probes: `softmax(beta(t) f^l)` at every position.
    fn predict_x(&self, z: &TokenSequence, t: f64, schedule: &DiffusionSchedule) -> Result<Vec<CategoricalDist>> {
        let beta = schedule.beta(t);
        Ok(self.logits(z, t, schedule)?.iter().map(|f| softmax(f, beta)).collect())
    }
}

pub(crate) fn check_input<D: Denoiser + ?Sized>(den: &D, z: &TokenSequence) -> Result<()> {
    if z.len() != den.seq_len() {
        return Err(Error::DimensionMismatch { expected: den.seq_len(), found: z.len() });
    }
    if z.vocab_size() != den.vocab_size() {
        return Err(Error::DimensionMismatch { expected: den.vocab_size(), found: z.vocab_size() });
    }
    Ok(())
}

/// `softmax(beta(t) f^position(z))`, the per-position conditional.
pub fn conditional_token_dist<D: Denoiser + ?Sized>(
    den: &D,
    z: &TokenSequence,
    t: f64,
    position: usize,
    schedule: &DiffusionSchedule,
) -> Result<CategoricalDist> {
    schedule.check_time(t)?;
    if position >= z.len() {
        return Err(Error::IndexOutOfRange { index: position, len: z.len() });
    }
    let logits = den.logits(z, t, schedule)?;
    Ok(softmax(&logits[position], schedule.beta(t)))
}

/// Denoiser that predicts a fixed sequence with certainty, whatever its input.
#[derive(Debug, Clone)]
pub struct FixedTargetDenoiser {
    pub target: TokenSequence,
}

impl Denoiser for FixedTargetDenoiser {
    fn seq_len(&self) -> usize {
        self.target.len()
    }

    fn vocab_size(&self) -> usize {
        self.target.vocab_size()
    }

    fn logits(&self, z: &TokenSequence, _t: f64, _schedule: &DiffusionSchedule) -> Result<Vec<Vec<f64>>> {
        check_input(self, z)?;
        Ok(self
            .target
            .tokens()
            .iter()
            .map(|&x| {
                let mut f = vec![0.0; self.vocab_size()];
                f[x] = 1e3;
                f
            })
            .collect())
    }

    fn predict_x(&self, z: &TokenSequence, _t: f64, _schedule: &DiffusionSchedule) -> Result<Vec<CategoricalDist>> {
        check_input(self, z)?;
        Ok(self.target.tokens().iter().map(|&x| CategoricalDist::one_hot(x, self.vocab_size())).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleMode {
    Stochastic,
    Greedy,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Self::Stochastic),
            "greedy" => Ok(Self::Greedy),
            other => Err(Error::InvalidArgument(format!("unknown sampling mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Stochastic => "stochastic",
            Self::Greedy => "greedy",
        })
    }
}

/// What [`reverse_sample_with`] returns once the grid reaches `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FinalStep {
    /// Argmax of the `x`-prediction at `epsilon`. The prediction for a
    /// position ignores that position's own token, so this replaces every
    /// token by its most likely value given the rest of the sequence.
    #[default]
    PredictionArgmax,
    /// The sampled state at `epsilon`, unchanged.
    Keep,
}

impl std::str::FromStr for FinalStep {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Self::PredictionArgmax),
            "keep" => Ok(Self::Keep),
            other => Err(Error::InvalidArgument(format!("unknown final step {other:?}"))),
        }
    }
}

impl std::fmt::Display for FinalStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PredictionArgmax => "argmax",
            Self::Keep => "keep",
        })
    }
}

/// Per-position model posteriors for one `t -> s` step.
pub fn step_posteriors<D: Denoiser + ?Sized>(
    den: &D,
    z: &TokenSequence,
    t: f64,
    s: f64,
    schedule: &DiffusionSchedule,
) -> Result<Vec<CategoricalDist>> {
    check_input(den, z)?;
    let (alpha_s, alpha_t) = (schedule.alpha(s), schedule.alpha(t));
    den.predict_x(z, t, schedule)?
        .iter()
        .zip(z.tokens())
        .map(|(pred, &zt)| model_posterior_from_alphas(zt, pred, alpha_s, alpha_t))
        .collect()
}

/// One reverse step `t -> s`, drawing every position from a single stream.
pub fn reverse_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    den: &D,
    z: &TokenSequence,
    t: f64,
    s: f64,
    schedule: &DiffusionSchedule,
    mode: SampleMode,
    rng: &mut R,
) -> Result<TokenSequence> {
    check_pair(s, t, schedule)?;
    let tokens = step_posteriors(den, z, t, s, schedule)?
        .iter()
        .map(|post| match mode {
            SampleMode::Greedy => post.argmax(),
            SampleMode::Stochastic => post.sample(rng),
        })
        .collect();
    TokenSequence::new(tokens, z.vocab_size())
}

/// Runs the factorised reverse process from `t_start` down to `epsilon` on a
/// uniform grid of `num_steps` intervals, then returns the argmax of the
/// `x`-prediction at `epsilon`.
///
/// Stochastic mode draws one seed from `rng` and gives every position its own
/// derived stream; greedy mode never touches `rng`.
pub fn reverse_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    den: &D,
    z_start: &TokenSequence,
    t_start: f64,
    num_steps: usize,
    schedule: &DiffusionSchedule,
    mode: SampleMode,
    rng: &mut R,
) -> Result<TokenSequence> {
    reverse_sample_with(den, z_start, t_start, num_steps, schedule, mode, FinalStep::PredictionArgmax, rng)
}

/// [`reverse_sample`] with a choice of final step.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sample_with<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    den: &D,
    z_start: &TokenSequence,
    t_start: f64,
    num_steps: usize,
    schedule: &DiffusionSchedule,
    mode: SampleMode,
    final_step: FinalStep,
    rng: &mut R,
) -> Result<TokenSequence> {
    if num_steps == 0 {
        return Err(Error::InvalidArgument("num_steps must be at least 1".into()));
    }
    if !(t_start > schedule.epsilon && t_start <= 1.0) {
        return Err(Error::TimeOutOfRange { t: t_start, lo: schedule.epsilon, hi: 1.0 });
    }
    check_input(den, z_start)?;
    let mut streams: Vec<StreamRng> = match mode {
        SampleMode::Stochastic => {
            let call_seed = rng.random::<u64>();
            (0..z_start.len()).map(|pos| seed::stream(call_seed, "reverse-position", pos as u64)).collect()
        }
        SampleMode::Greedy => Vec::new(),
    };
    let grid = schedule.time_grid(t_start, num_steps);
    let mut z = z_start.clone();
    for i in (1..=num_steps).rev() {
        let posts = step_posteriors(den, &z, grid[i], grid[i - 1], schedule)?;
        let tokens = posts
            .iter()
            .enumerate()
            .map(|(pos, post)| match mode {
                SampleMode::Greedy => post.argmax(),
                SampleMode::Stochastic => post.sample(&mut streams[pos]),
            })
            .collect();
        z = TokenSequence { tokens, vocab_size: z.vocab_size };
    }
    if final_step == FinalStep::Keep {
        return Ok(z);
    }
    let tokens = den.predict_x(&z, schedule.epsilon, schedule)?.iter().map(CategoricalDist::argmax).collect();
    TokenSequence::new(tokens, z.vocab_size)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub diffusion: f64,
    pub prior: f64,
    pub total: f64,
    /// Standard error of the Monte-Carlo part (reconstruction + diffusion).
    pub std_error: f64,
}

/// Closed-form `KL(q(z_1 | x) || uniform)` for one position.
pub fn prior_kl(vocab_size: usize, alpha_1: f64) -> f64 {
    let kf = vocab_size as f64;
    let hit = alpha_1 + (1.0 - alpha_1) / kf;
    let miss = (1.0 - alpha_1) / kf;
    let mut kl = hit * (kf * hit).ln();
    if miss > 0.0 {
        kl += (kf - 1.0) * miss * (kf * miss).ln();
    }
    kl.max(0.0)
}

/// Monte-Carlo NELBO of one sequence.
///
/// Each of `num_time_samples` draws contributes a reconstruction term at
/// `epsilon` and a diffusion term on a uniformly chosen interval of a
/// `num_grid_steps`-interval grid, scaled by the number of intervals. The
/// prior term is exact.
pub fn nelbo<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    den: &D,
    x: &TokenSequence,
    schedule: &DiffusionSchedule,
    num_time_samples: usize,
    num_grid_steps: usize,
    rng: &mut R,
) -> Result<LossBreakdown> {
    if num_time_samples == 0 || num_grid_steps < 2 {
        return Err(Error::InvalidArgument("nelbo needs at least one time sample and two grid steps".into()));
    }
    check_input(den, x)?;
    let k = x.vocab_size();
    let grid = schedule.time_grid(1.0, num_grid_steps);
    let mut rec_sum = 0.0;
    let mut diff_sum = 0.0;
    let mut draws = Vec::with_capacity(num_time_samples);
    for _ in 0..num_time_samples {
        let (z_eps, _) = forward_corrupt(x, schedule.epsilon, schedule, rng)?;
        let preds = den.predict_x(&z_eps, schedule.epsilon, schedule)?;
        let mut rec = 0.0;
        for (pred, &xl) in preds.iter().zip(x.tokens()) {
            let p = pred.probs()[xl];
            if p <= 0.0 {
                return Err(Error::NonFiniteKl(format!("reconstruction assigns zero probability to token {xl}")));
            }
            rec -= p.ln();
        }

        let i = rng.random_range(1..=num_grid_steps);
        let (s, t) = (grid[i - 1], grid[i]);
        let (alpha_s, alpha_t) = (schedule.alpha(s), schedule.alpha(t));
        let (z_t, _) = forward_corrupt(x, t, schedule, rng)?;
        let preds = den.predict_x(&z_t, t, schedule)?;
        let mut diff = 0.0;
        for ((pred, &zt), &xl) in preds.iter().zip(z_t.tokens()).zip(x.tokens()) {
            let q = posterior_from_alphas(zt, xl, alpha_s, alpha_t, k)?;
            let p = model_posterior_from_alphas(zt, pred, alpha_s, alpha_t)?;
            diff += kl_divergence(&q, &p)?;
        }
        diff *= num_grid_steps as f64;

        rec_sum += rec;
        diff_sum += diff;
        draws.push(rec + diff);
    }
    let n = num_time_samples as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let std_error = if num_time_samples > 1 {
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        f64::NAN
    };
    let reconstruction = rec_sum / n;
    let diffusion = diff_sum / n;
    let prior = x.len() as f64 * prior_kl(k, schedule.alpha(1.0));
    Ok(LossBreakdown { reconstruction, diffusion, prior, total: reconstruction + diffusion + prior, std_error })
}
