//! Pairwise coupled-logits denoiser.
//!
//! Position `l` sees every other position `m` through a `K x K` matrix
//! `U^{lm}` whose column is selected by the observed token at `m`:
//!
//! `f^l(z, t) = s(t) * (b^l + sum_{m != l} U^{lm}[:, z^m])`,
//! `s(t) = softplus(s0 + s1 * alpha(t))`.
//!
//! The `x`-prediction is `softmax(beta(t) f^l)`. Training minimises the
//! time-sampled reconstruction cross-entropy with plain SGD.
//!
//! Parameters live in one flat vector: couplings in `(l, m, row, col)` order
//! with `m` ascending and skipping `l`, then biases `(l, row)`, then `s0, s1`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};
use crate::uddm::{self, CategoricalDist, Denoiser, DiffusionSchedule, TokenSequence};

const PROB_FLOOR: f64 = 1e-12;
pub const CHECKPOINT_MAGIC: &str = "UDDM-CLD v1";
/// Refuse models larger than this many parameters.
pub const MAX_PARAMETERS: usize = 100_000_000;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledLogitsDenoiser {
    seq_len: usize,
    vocab_size: usize,
    params: Vec<f64>,
}

/// Total parameter count for `(L, K)`, or `None` on overflow.
pub fn parameter_count(seq_len: usize, vocab_size: usize) -> Option<usize> {
    let couplings = seq_len.checked_mul(seq_len.saturating_sub(1))?.checked_mul(vocab_size.checked_mul(vocab_size)?)?;
    couplings.checked_add(seq_len.checked_mul(vocab_size)?)?.checked_add(2)
}

impl CoupledLogitsDenoiser {
    /// All-zero model: uniform predictions at every position.
    pub fn zeros(seq_len: usize, vocab_size: usize) -> Result<Self> {
        if seq_len < 2 || vocab_size < 2 {
            return Err(Error::InvalidArgument(format!("need L >= 2 and K >= 2, got L={seq_len}, K={vocab_size}")));
        }
        let count = parameter_count(seq_len, vocab_size)
            .filter(|c| *c <= MAX_PARAMETERS)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "L={seq_len}, K={vocab_size} needs {} parameters, above the limit of {MAX_PARAMETERS}",
                    parameter_count(seq_len, vocab_size).map_or("too many".to_string(), |c| c.to_string())
                ))
            })?;
        Ok(Self { seq_len, vocab_size, params: vec![0.0; count] })
    }

    pub fn from_params(seq_len: usize, vocab_size: usize, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeros(seq_len, vocab_size)?;
        if params.len() != model.params.len() {
            return Err(Error::DimensionMismatch { expected: model.params.len(), found: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn coupling_len(&self) -> usize {
        self.seq_len * (self.seq_len - 1) * self.vocab_size * self.vocab_size
    }

    /// Offset of `U^{lm}` in the flat parameter vector.
    pub fn coupling_offset(&self, l: usize, m: usize) -> usize {
        debug_assert!(l != m);
        let slot = l * (self.seq_len - 1) + if m < l { m } else { m - 1 };
        slot * self.vocab_size * self.vocab_size
    }

    pub fn bias_offset(&self, l: usize) -> usize {
        self.coupling_len() + l * self.vocab_size
    }

    fn scale_offset(&self) -> usize {
        self.params.len() - 2
    }

    pub fn coupling(&self, l: usize, m: usize, row: usize, col: usize) -> f64 {
        self.params[self.coupling_offset(l, m) + row * self.vocab_size + col]
    }

    pub fn set_coupling(&mut self, l: usize, m: usize, row: usize, col: usize, value: f64) {
        let i = self.coupling_offset(l, m) + row * self.vocab_size + col;
        self.params[i] = value;
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let o = self.bias_offset(l);
        &self.params[o..o + self.vocab_size]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let o = self.bias_offset(l);
        let k = self.vocab_size;
        &mut self.params[o..o + k]
    }

    /// Raw `(s0, s1)`.
    pub fn time_scale(&self) -> (f64, f64) {
        let o = self.scale_offset();
        (self.params[o], self.params[o + 1])
    }

    pub fn set_time_scale(&mut self, s0: f64, s1: f64) {
        let o = self.scale_offset();
        self.params[o] = s0;
        self.params[o + 1] = s1;
    }

    /// `s(t)`.
    pub fn scale(&self, t: f64, schedule: &DiffusionSchedule) -> f64 {
        let (s0, s1) = self.time_scale();
        softplus(s0 + s1 * schedule.alpha(t))
    }

    /// Unscaled activations `b^l + sum_{m != l} U^{lm}[:, z^m]`.
    fn activations(&self, z: &[usize]) -> Vec<Vec<f64>> {
        let k = self.vocab_size;
        (0..self.seq_len)
            .map(|l| {
                let mut a = self.bias(l).to_vec();
                for (m, &zm) in z.iter().enumerate() {
                    if m == l {
                        continue;
                    }
                    let base = self.coupling_offset(l, m) + zm;
                    for (row, a_row) in a.iter_mut().enumerate() {
                        *a_row += self.params[base + row * k];
                    }
                }
                a
            })
            .collect()
    }

    fn check(&self, z: &TokenSequence) -> Result<()> {
        uddm::check_input(self, z)
    }

    /// Serialises to the checkpoint format.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let (s0, s1) = self.time_scale();
        let mut out = format!("{CHECKPOINT_MAGIC}\nL={} K={} s0={s0:?} s1={s1:?}\n", self.seq_len, self.vocab_size).into_bytes();
        for p in &self.params[..self.scale_offset()] {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Malformed { what: "checkpoint", detail };
        let magic = format!("{CHECKPOINT_MAGIC}\n");
        let rest = bytes.strip_prefix(magic.as_bytes()).ok_or_else(|| bad(format!("missing `{CHECKPOINT_MAGIC}` magic line")))?;
        let newline = rest.iter().position(|b| *b == b'\n').ok_or_else(|| bad("unterminated header".into()))?;
        let header = std::str::from_utf8(&rest[..newline]).map_err(|_| bad("header is not UTF-8".into()))?;
        let field = |key: &str| -> Result<&str> {
            header
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| bad(format!("header lacks {key}")))
        };
        let parse_usize = |key: &str| -> Result<usize> { field(key)?.parse().map_err(|e| bad(format!("{key}: {e}"))) };
        let parse_f64 = |key: &str| -> Result<f64> { field(key)?.parse().map_err(|e| bad(format!("{key}: {e}"))) };
        let (l, k) = (parse_usize("L")?, parse_usize("K")?);
        let (s0, s1) = (parse_f64("s0")?, parse_f64("s1")?);
        let mut model = Self::zeros(l, k)?;
        let block = &rest[newline + 1..];
        let expected = 8 * model.scale_offset();
        if block.len() != expected {
            return Err(Error::TruncatedCheckpoint { expected, found: block.len() });
        }
        for (p, chunk) in model.params.iter_mut().zip(block.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        model.set_time_scale(s0, s1);
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Loads and checks the dimensions against what the caller is about to use.
    pub fn load_checkpoint_expecting(path: &Path, seq_len: usize, vocab_size: usize) -> Result<Self> {
        let model = Self::load_checkpoint(path)?;
        if model.seq_len != seq_len {
            return Err(Error::DimensionMismatch { expected: seq_len, found: model.seq_len });
        }
        if model.vocab_size != vocab_size {
            return Err(Error::DimensionMismatch { expected: vocab_size, found: model.vocab_size });
        }
        Ok(model)
    }
}

impl Denoiser for CoupledLogitsDenoiser {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits(&self, z: &TokenSequence, t: f64, schedule: &DiffusionSchedule) -> Result<Vec<Vec<f64>>> {
        self.check(z)?;
        let s = self.scale(t, schedule);
        Ok(self.activations(z.tokens()).into_iter().map(|a| a.into_iter().map(|v| s * v).collect()).collect())
    }

    /// Folds `beta(t)` into the logit scale: `softmax(beta(t) s(t) a^l)`.
    fn predict_x(&self, z: &TokenSequence, t: f64, schedule: &DiffusionSchedule) -> Result<Vec<CategoricalDist>> {
        self.check(z)?;
        let gain = schedule.beta(t) * self.scale(t, schedule);
        Ok(self.activations(z.tokens()).iter().map(|a| uddm::softmax(a, gain)).collect())
    }
}

/// One training example: clean sequence, its corruption and the corruption time.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub clean: TokenSequence,
    pub noisy: TokenSequence,
    pub t: f64,
}

/// Mean cross-entropy `-sum_l ln max(p(x^l | z_t), 1e-12)` over the examples and
/// its exact gradient, accumulated in example order.
pub fn loss_and_grad_on(
    model: &CoupledLogitsDenoiser,
    examples: &[Example],
    schedule: &DiffusionSchedule,
) -> Result<(f64, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let k = model.vocab_size;
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    let (s0, s1) = model.time_scale();
    let scale_at = model.scale_offset();
    for ex in examples {
        model.check(&ex.clean)?;
        model.check(&ex.noisy)?;
        let alpha = schedule.alpha(ex.t);
        let beta = schedule.beta(ex.t);
        let pre = s0 + s1 * alpha;
        let gain = beta * softplus(pre);
        let z = ex.noisy.tokens();
        let mut d_gain = 0.0;
        for (l, a) in model.activations(z).iter().enumerate() {
            let x = ex.clean.tokens()[l];
            let p = uddm::softmax(a, gain);
            let px = p.probs()[x];
            if px < PROB_FLOOR {
                // The floor is flat, so this position contributes no gradient.
                loss -= PROB_FLOOR.ln();
                continue;
            }
            loss -= px.ln();
            // d(-ln p_x)/d a_row = gain * (p_row - [row == x]).
            let residual: Vec<f64> = p.probs().iter().enumerate().map(|(row, pr)| pr - f64::from(u8::from(row == x))).collect();
            d_gain += residual.iter().zip(a).map(|(r, av)| r * av).sum::<f64>();
            let bo = model.bias_offset(l);
            for (row, r) in residual.iter().enumerate() {
                grad[bo + row] += gain * r;
            }
            for (m, &zm) in z.iter().enumerate() {
                if m == l {
                    continue;
                }
                let base = model.coupling_offset(l, m) + zm;
                for (row, r) in residual.iter().enumerate() {
                    grad[base + row * k] += gain * r;
                }
            }
        }
        let d_pre = d_gain * beta * sigmoid(pre);
        grad[scale_at] += d_pre;
        grad[scale_at + 1] += d_pre * alpha;
    }
    let n = examples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Draws one corruption time and corruption per sequence, then evaluates
/// [`loss_and_grad_on`]. Sequence `i` uses a stream derived from a single
/// draw of `rng`, so results do not depend on evaluation order.
pub fn loss_and_grad<R: Rng + ?Sized>(
    model: &CoupledLogitsDenoiser,
    batch: &[TokenSequence],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let examples = sample_examples(batch, schedule, rng)?;
    loss_and_grad_on(model, &examples, schedule)
}

pub fn sample_examples<R: Rng + ?Sized>(batch: &[TokenSequence], schedule: &DiffusionSchedule, rng: &mut R) -> Result<Vec<Example>> {
    let batch_seed = rng.random::<u64>();
    batch
        .iter()
        .enumerate()
        .map(|(i, clean)| {
            let mut r = seed::stream(batch_seed, "example", i as u64);
            let t = schedule.epsilon + (1.0 - schedule.epsilon) * r.random::<f64>();
            let (noisy, _) = uddm::forward_corrupt(clean, t, schedule, &mut r)?;
            Ok(Example { clean: clean.clone(), noisy, t })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// NELBO evaluation period in epochs; 0 disables evaluation.
    pub eval_every: usize,
    /// Held-out sequences used for evaluation (test split, else train).
    pub eval_sequences: usize,
    pub eval_time_samples: usize,
    pub eval_grid_steps: usize,
    /// Batch gradients with a larger Euclidean norm are rescaled to this norm;
    /// `f64::INFINITY` disables clipping.
    pub max_grad_norm: f64,
    pub schedule: DiffusionSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            eval_every: 5,
            eval_sequences: 64,
            eval_time_samples: 4,
            eval_grid_steps: 100,
            max_grad_norm: 5.0,
            schedule: DiffusionSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_nelbo: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV without the wall-clock column, so equal runs give equal files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,eval_nelbo,grad_norm\n");
        for r in &self.records {
            let nelbo = r.eval_nelbo.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(out, "{},{},{nelbo},{}", r.epoch, r.train_loss, r.grad_norm);
        }
        out
    }

    pub fn eval_trace(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.eval_nelbo.map(|v| (r.epoch, v))).collect()
    }
}

/// Mean NELBO over the evaluation slice with common random numbers: the same
/// seed gives the same corruption noise for every model.
pub fn eval_nelbo(
    model: &CoupledLogitsDenoiser,
    sequences: &[TokenSequence],
    config: &TrainConfig,
    eval_seed: u64,
) -> Result<f64> {
    let totals = sequences
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r = seed::stream(eval_seed, "eval-sequence", i as u64);
            uddm::nelbo(model, x, &config.schedule, config.eval_time_samples, config.eval_grid_steps, &mut r).map(|b| b.total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(totals.iter().sum::<f64>() / totals.len() as f64)
}

fn eval_slice<'a>(dataset: &'a Dataset, config: &TrainConfig) -> &'a [TokenSequence] {
    let pool = if dataset.test.is_empty() { &dataset.train } else { &dataset.test };
    &pool[..config.eval_sequences.min(pool.len())]
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 50;

/// Trains a zero-initialised model.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(CoupledLogitsDenoiser, TrainLog)> {
    let model = CoupledLogitsDenoiser::zeros(dataset.seq_len, dataset.vocab_size)?;
    train_from(model, dataset, config, 0)
}

/// Continues training `model` from `start_epoch` up to `config.epochs`.
///
/// Epoch `e` shuffles with a stream derived from `(seed, "epoch", e)` and
/// batch `b` draws its noise from one derived from that epoch seed, so
/// resuming from a checkpoint taken after epoch `e` replays the uninterrupted
/// run exactly.
pub fn train_from(
    mut model: CoupledLogitsDenoiser,
    dataset: &Dataset,
    config: &TrainConfig,
    start_epoch: usize,
) -> Result<(CoupledLogitsDenoiser, TrainLog)> {
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be positive", config.learning_rate)));
    }
    if config.max_grad_norm.is_nan() || config.max_grad_norm <= 0.0 {
        return Err(Error::InvalidArgument(format!("max gradient norm {} must be positive", config.max_grad_norm)));
    }
    if model.seq_len != dataset.seq_len || model.vocab_size != dataset.vocab_size {
        return Err(Error::DimensionMismatch { expected: dataset.seq_len * dataset.vocab_size, found: model.seq_len * model.vocab_size });
    }
    let started = Instant::now();
    let eval_seed = seed::derive(config.seed, "eval", 0);
    let eval_set = eval_slice(dataset, config);
    let should_eval = |epoch: usize| config.eval_every > 0 && (epoch.is_multiple_of(config.eval_every) || epoch == config.epochs);
    let mut log = TrainLog::default();

    if start_epoch == 0 {
        let mut r = seed::stream(config.seed, "initial-loss", 0);
        let (loss, grad) = loss_and_grad(&model, &dataset.train, &config.schedule, &mut r)?;
        let eval = if should_eval(0) { Some(eval_nelbo(&model, eval_set, config, eval_seed)?) } else { None };
        log.records.push(EpochRecord {
            epoch: 0,
            train_loss: loss,
            eval_nelbo: eval,
            grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut reference: Option<f64> = None;
    let mut above = 0usize;
    for epoch in (start_epoch + 1)..=config.epochs {
        let epoch_seed = seed::derive(config.seed, "epoch", epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut seed::stream(epoch_seed, "shuffle", 0));
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| dataset.train[i].clone()).collect();
            let mut r: StreamRng = seed::stream(epoch_seed, "batch", b as u64);
            let (loss, grad) = loss_and_grad(&model, &batch, &config.schedule, &mut r)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, loss });
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let step = if norm > config.max_grad_norm { config.learning_rate * config.max_grad_norm / norm } else { config.learning_rate };
            for (p, g) in model.params.iter_mut().zip(&grad) {
                *p -= step * g;
            }
            loss_sum += loss * batch.len() as f64;
            norm_sum += norm;
            batches += 1;
        }
        let train_loss = loss_sum / dataset.train.len() as f64;
        if !train_loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch, loss: train_loss });
        }
        let initial = *reference.get_or_insert(train_loss);
        if train_loss > DIVERGENCE_FACTOR * initial {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged { epoch, loss: train_loss, initial });
            }
        } else {
            above = 0;
        }
        let eval = if should_eval(epoch) { Some(eval_nelbo(&model, eval_set, config, eval_seed)?) } else { None };
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            eval_nelbo: eval,
            grad_norm: norm_sum / batches as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_archetype_dataset, ArchetypeConfig};
    use crate::uddm::{conditional_token_dist, reverse_sample, SampleMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(l: usize, k: usize, rng: &mut ChaCha8Rng) -> CoupledLogitsDenoiser {
        let n = parameter_count(l, k).unwrap();
        let params = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        CoupledLogitsDenoiser::from_params(l, k, params).unwrap()
    }

    fn random_examples(l: usize, k: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
        (0..n)
            .map(|_| Example {
                clean: TokenSequence::uniform_random(l, k, rng).unwrap(),
                noisy: TokenSequence::uniform_random(l, k, rng).unwrap(),
                t: 0.05 + 0.9 * rng.random::<f64>(),
            })
            .collect()
    }

    #[test]
    fn zero_model_is_uniform() {
        let s = DiffusionSchedule::default();
        let m = CoupledLogitsDenoiser::zeros(4, 5).unwrap();
        let z = TokenSequence::new(vec![0, 1, 2, 3], 5).unwrap();
        assert!(m.logits(&z, 0.5, &s).unwrap().iter().flatten().all(|v| *v == 0.0));
        for d in m.predict_x(&z, 0.5, &s).unwrap() {
            assert!(d.probs().iter().all(|p| (p - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn selected_column_hand_value() {
        let s = DiffusionSchedule::default();
        let mut m = CoupledLogitsDenoiser::zeros(2, 2).unwrap();
        m.set_coupling(0, 1, 0, 0, 1.0);
        m.set_coupling(0, 1, 1, 1, 1.0);
        // softplus(s0) = 1.
        m.set_time_scale((1f64.exp() - 1.0).ln(), 0.0);
        for z1 in 0..2 {
            let z = TokenSequence::new(vec![0, z1], 2).unwrap();
            let f = &m.logits(&z, 0.4, &s).unwrap()[0];
            assert!((f[z1] - 1.0).abs() < 1e-15 && f[1 - z1].abs() < 1e-15);
        }
    }

    #[test]
    fn relabelling_positions_permutes_logits() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, k) = (4, 3);
        let m = random_model(l, k, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut p = CoupledLogitsDenoiser::zeros(l, k).unwrap();
        for a in 0..l {
            p.bias_mut(perm[a]).copy_from_slice(m.bias(a));
            for b in 0..l {
                if a != b {
                    for row in 0..k {
                        for col in 0..k {
                            p.set_coupling(perm[a], perm[b], row, col, m.coupling(a, b, row, col));
                        }
                    }
                }
            }
        }
        let (s0, s1) = m.time_scale();
        p.set_time_scale(s0, s1);
        let z = TokenSequence::uniform_random(l, k, &mut rng).unwrap();
        let mut zp = vec![0; l];
        for a in 0..l {
            zp[perm[a]] = z.tokens()[a];
        }
        let zp = TokenSequence::new(zp, k).unwrap();
        let f = m.logits(&z, 0.3, &s).unwrap();
        let fp = p.logits(&zp, 0.3, &s).unwrap();
        for a in 0..l {
            for (x, y) in f[a].iter().zip(&fp[perm[a]]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_x_matches_conditional_token_dist() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(5, 4, &mut rng);
        let z = TokenSequence::uniform_random(5, 4, &mut rng).unwrap();
        for t in [s.epsilon, 0.3, 1.0] {
            let pred = m.predict_x(&z, t, &s).unwrap();
            for (pos, d) in pred.iter().enumerate() {
                let c = conditional_token_dist(&m, &z, t, pos, &s).unwrap();
                for (a, b) in d.probs().iter().zip(c.probs()) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_gap_is_near_one_hot() {
        let s = DiffusionSchedule { beta_slope: 0.0, ..Default::default() };
        let mut m = CoupledLogitsDenoiser::zeros(2, 3).unwrap();
        m.set_time_scale((1f64.exp() - 1.0).ln(), 0.0);
        m.bias_mut(0)[2] = 30.0;
        let z = TokenSequence::new(vec![0, 0], 3).unwrap();
        assert!(m.predict_x(&z, 0.5, &s).unwrap()[0].probs()[2] >= 1.0 - 1e-9);
    }

    #[test]
    fn bias_shift_invariance_and_no_self_leak() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(5, 4, &mut rng);
        let z = TokenSequence::uniform_random(5, 4, &mut rng).unwrap();
        let mut shifted = m.clone();
        shifted.bias_mut(2).iter_mut().for_each(|b| *b += 3.7);
        let a = m.predict_x(&z, 0.4, &s).unwrap();
        let b = shifted.predict_x(&z, 0.4, &s).unwrap();
        for (p, q) in a[2].probs().iter().zip(b[2].probs()) {
            assert!((p - q).abs() < 1e-12);
        }
        for l in 0..5 {
            let base = m.predict_x(&z, 0.4, &s).unwrap();
            for v in 0..4 {
                let mutated = z.with_token(l, v).unwrap();
                assert_eq!(m.predict_x(&mutated, 0.4, &s).unwrap()[l], base[l]);
            }
        }
    }

    /// Finite-difference oracle: `|a - f| / max(|a|, |f|, 1e-3)`.
    pub(crate) fn max_relative_gradient_error(model: &CoupledLogitsDenoiser, examples: &[Example], schedule: &DiffusionSchedule) -> f64 {
        let (_, grad) = loss_and_grad_on(model, examples, schedule).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for i in 0..model.num_params() {
            let mut plus = model.clone();
            plus.params_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss_and_grad_on(&plus, examples, schedule).unwrap().0 - loss_and_grad_on(&minus, examples, schedule).unwrap().0)
                / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(fd.abs()).max(1e-3));
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let m = random_model(3, 3, &mut rng);
            let ex = random_examples(3, 3, 2, &mut rng);
            assert!(max_relative_gradient_error(&m, &ex, &s) <= 1e-5);
        }
    }

    #[test]
    fn optimum_has_zero_loss_and_gradient() {
        let s = DiffusionSchedule::default();
        let x = TokenSequence::new(vec![1, 0, 2], 3).unwrap();
        let mut m = CoupledLogitsDenoiser::zeros(3, 3).unwrap();
        m.set_time_scale(40.0, 0.0);
        for (l, &xl) in x.tokens().iter().enumerate() {
            m.bias_mut(l)[xl] = 1.0;
        }
        let ex = vec![Example { clean: x.clone(), noisy: x.clone(), t: s.epsilon }; 3];
        let (loss, grad) = loss_and_grad_on(&m, &ex, &s).unwrap();
        assert!(loss <= 1e-6);
        assert!(grad.iter().map(|g| g * g).sum::<f64>().sqrt() <= 1e-6);
    }

    #[test]
    fn duplicated_batch_has_same_mean() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(4, 3, &mut rng);
        let ex = random_examples(4, 3, 3, &mut rng);
        let doubled: Vec<Example> = ex.iter().chain(&ex).cloned().collect();
        let (l1, g1) = loss_and_grad_on(&m, &ex, &s).unwrap();
        let (l2, g2) = loss_and_grad_on(&m, &doubled, &s).unwrap();
        assert!((l1 - l2).abs() <= 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(loss_and_grad_on(&m, &[], &s).is_err());
    }

    fn single_sequence_dataset(l: usize, k: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        Dataset {
            train: vec![TokenSequence::uniform_random(l, k, &mut rng).unwrap()],
            test: vec![],
            vocab_size: k,
            seq_len: l,
            provenance: "single".into(),
        }
    }

    #[test]
    fn memorises_a_single_sequence() {
        let d = single_sequence_dataset(8, 8);
        let cfg = TrainConfig { epochs: 300, batch_size: 1, eval_every: 0, ..Default::default() };
        let (m, _) = train(&d, &cfg).unwrap();
        let s = cfg.schedule;
        let x = &d.train[0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut fixed = 0;
        for _ in 0..100 {
            let (z, _) = uddm::forward_corrupt(x, 0.3, &s, &mut rng).unwrap();
            if reverse_sample(&m, &z, 0.3, 20, &s, SampleMode::Greedy, &mut rng).unwrap() == *x {
                fixed += 1;
            }
        }
        assert!(fixed >= 95, "{fixed}");
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let d = gen_archetype_dataset(&ArchetypeConfig { seq_len: 6, vocab_size: 4, n_train: 40, n_test: 10, ..Default::default() }, 3).unwrap();
        let cfg = TrainConfig { epochs: 6, batch_size: 8, eval_every: 3, eval_sequences: 8, ..Default::default() };
        let (a, log_a) = train(&d, &cfg).unwrap();
        let (b, log_b) = train(&d, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(log_a.to_csv(), log_b.to_csv());
        let (half, _) = train(&d, &TrainConfig { epochs: 3, ..cfg }).unwrap();
        let (resumed, _) = train_from(half, &d, &cfg, 3).unwrap();
        assert_eq!(resumed.params(), a.params());
    }

    #[test]
    fn eval_nelbo_trace_decreases_when_smoothed() {
        // Full-batch steps on enough data that the held-out NELBO is still in its
        // descent phase; cross-entropy training eventually lets it drift back up.
        let d = gen_archetype_dataset(&ArchetypeConfig { seq_len: 6, vocab_size: 4, n_train: 600, n_test: 40, ..Default::default() }, 4).unwrap();
        let cfg = TrainConfig { learning_rate: 1.0, epochs: 25, batch_size: 600, eval_every: 1, eval_sequences: 40, eval_time_samples: 16, ..Default::default() };
        let (_, log) = train(&d, &cfg).unwrap();
        let trace: Vec<f64> = log.eval_trace().into_iter().map(|(_, v)| v).collect();
        let smoothed: Vec<f64> = trace.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        for w in smoothed.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{smoothed:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_model(4, 3, &mut rng);
        let bytes = m.to_checkpoint_bytes();
        assert_eq!(CoupledLogitsDenoiser::from_checkpoint_bytes(&bytes).unwrap(), m);
        let cut = &bytes[..bytes.len() - 5];
        let expected = 8 * (4 * 3 * 9 + 12);
        match CoupledLogitsDenoiser::from_checkpoint_bytes(cut) {
            Err(Error::TruncatedCheckpoint { expected: e, found }) => assert_eq!((e, found), (expected, expected - 5)),
            other => panic!("{other:?}"),
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        m.save_checkpoint(&path).unwrap();
        assert_eq!(CoupledLogitsDenoiser::load_checkpoint_expecting(&path, 4, 3).unwrap(), m);
        assert!(matches!(CoupledLogitsDenoiser::load_checkpoint_expecting(&path, 5, 3), Err(Error::DimensionMismatch { .. })));
        assert!(CoupledLogitsDenoiser::from_checkpoint_bytes(b"nope").is_err());
    }

    #[test]
    fn parameter_guard() {
        assert!(CoupledLogitsDenoiser::zeros(200, 100).is_err());
        assert!(CoupledLogitsDenoiser::zeros(1, 4).is_err());
        assert_eq!(parameter_count(16, 16), Some(16 * 15 * 256 + 256 + 2));
    }
}
