//! Binary associative memory trained by pseudo-likelihood.
//!
//! A memory of `L` spins `s ∈ {-1,+1}^L` with a coupling matrix `W` (zero
//! diagonal, not necessarily symmetric). The local field at site `l` is
//! `f_l(s) = beta * sum_{m != l} W[l][m] s_m`, the conditional law of a spin is
//! logistic, `P(s_l = +1 | rest) = sigmoid(2 f_l)`, and training minimises the
//! negative log pseudo-likelihood of the stored patterns.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpinPattern {
    spins: Vec<i8>,
}

impl SpinPattern {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if spins.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "spin patterns need at least 2 sites, got {}",
                spins.len()
            )));
        }
        if let Some(bad) = spins.iter().find(|s| **s != 1 && **s != -1) {
            return Err(Error::InvalidArgument(format!("spin value {bad} is not -1 or +1")));
        }
        Ok(Self { spins })
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..len).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    /// The pattern with every spin reversed.
    pub fn negated(&self) -> Self {
        Self { spins: self.spins.iter().map(|s| -s).collect() }
    }

    /// Copy with exactly `count` distinct sites flipped, chosen uniformly.
    pub fn with_flips<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Self {
        let mut out = self.clone();
        let count = count.min(self.len());
        for site in rand::seq::index::sample(rng, self.len(), count) {
            out.spins[site] = -out.spins[site];
        }
        out
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.spins.iter().zip(&other.spins).filter(|(a, b)| a != b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    patterns: Vec<SpinPattern>,
}

impl PatternSet {
    pub fn new(patterns: Vec<SpinPattern>) -> Result<Self> {
        let first = patterns.first().ok_or(Error::EmptyPatterns)?;
        let len = first.len();
        if let Some(p) = patterns.iter().find(|p| p.len() != len) {
            return Err(Error::DimensionMismatch { expected: len, found: p.len() });
        }
        Ok(Self { patterns })
    }

    pub fn random<R: Rng + ?Sized>(count: usize, len: usize, rng: &mut R) -> Result<Self> {
        let patterns = (0..count).map(|_| SpinPattern::random(len, rng)).collect::<Result<_>>()?;
        Self::new(patterns)
    }

    pub fn patterns(&self) -> &[SpinPattern] {
        &self.patterns
    }

    /// Number of patterns `P`.
    pub fn count(&self) -> usize {
        self.patterns.len()
    }

    /// Pattern length `L`.
    pub fn pattern_len(&self) -> usize {
        self.patterns[0].len()
    }

    /// The load `P / L`.
    pub fn load(&self) -> f64 {
        self.count() as f64 / self.pattern_len() as f64
    }

    pub fn negated(&self) -> Self {
        Self { patterns: self.patterns.iter().map(SpinPattern::negated).collect() }
    }
}

/// Couplings `W` (row-major, `L x L`, zero diagonal) and inverse temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    len: usize,
    weights: Vec<f64>,
    beta: f64,
}

impl CouplingMatrix {
    pub fn zeros(len: usize, beta: f64) -> Result<Self> {
        Self::from_weights(len, vec![0.0; len * len], beta)
    }

    /// Builds a matrix from row-major weights. The diagonal must already be zero.
    pub fn from_weights(len: usize, weights: Vec<f64>, beta: f64) -> Result<Self> {
        if weights.len() != len * len {
            return Err(Error::DimensionMismatch { expected: len * len, found: weights.len() });
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidArgument(format!("inverse temperature {beta} must be positive")));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("coupling weights must be finite".into()));
        }
        if let Some(l) = (0..len).find(|&l| weights[l * len + l] != 0.0) {
            return Err(Error::InvalidArgument(format!("diagonal entry ({l},{l}) is not zero")));
        }
        Ok(Self { len, weights, beta })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.len + col]
    }

    fn check_len(&self, found: usize) -> Result<()> {
        if found != self.len {
            return Err(Error::DimensionMismatch { expected: self.len, found });
        }
        Ok(())
    }

    /// Raw fields `sum_m W[l][m] s_m` (no `beta`).
    fn raw_fields(&self, spins: &[i8]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.len)
            .map(|row| row.iter().zip(spins).map(|(w, s)| w * f64::from(*s)).sum())
            .collect()
    }

    /// Gradient step `W -= lr * grad`, re-zeroing the diagonal.
    fn descend(&mut self, grad: &[f64], lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= lr * g;
        }
        for l in 0..self.len {
            self.weights[l * self.len + l] = 0.0;
        }
    }

    /// Checkpoint text: a `PLAM v1 L=<L> beta=<beta>` header followed by `L`
    /// rows of `L` space-separated floats in shortest round-trip form.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = format!("PLAM v1 L={} beta={:?}\n", self.len, self.beta);
        for row in self.weights.chunks_exact(self.len) {
            let line: Vec<String> = row.iter().map(|w| format!("{w:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn parse_checkpoint(text: &str) -> Result<Self> {
        let malformed = |detail: String| Error::Malformed { what: "PLAM checkpoint", detail };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "PLAM" || fields[1] != "v1" {
            return Err(malformed(format!("bad header {header:?}")));
        }
        let len: usize = fields[2]
            .strip_prefix("L=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| malformed(format!("bad length field {:?}", fields[2])))?;
        let beta: f64 = fields[3]
            .strip_prefix("beta=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| malformed(format!("bad beta field {:?}", fields[3])))?;
        let mut weights = Vec::with_capacity(len * len);
        for row in 0..len {
            let line = lines.next().ok_or_else(|| malformed(format!("missing row {row}")))?;
            let before = weights.len();
            for tok in line.split_whitespace() {
                weights.push(tok.parse::<f64>().map_err(|e| malformed(format!("row {row}: {e}")))?);
            }
            if weights.len() - before != len {
                return Err(malformed(format!("row {row} has {} entries, expected {len}", weights.len() - before)));
            }
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(malformed("trailing data after the last row".into()));
        }
        Self::from_weights(len, weights, beta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_checkpoint(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    pub per_site_margins: Vec<f64>,
    pub min_margin: f64,
    pub separable: bool,
}

/// `log(2 cosh f)` without overflow.
fn log_2cosh(f: f64) -> f64 {
    let a = f.abs();
    a + (-2.0 * a).exp().ln_1p()
}

/// Hebbian couplings `W[l][m] = (1/L) * mean_p x_p^l x_p^m`, zero diagonal.
pub fn hebbian_couplings(patterns: &PatternSet, beta: f64) -> Result<CouplingMatrix> {
    let len = patterns.pattern_len();
    let mut weights = vec![0.0; len * len];
    for p in patterns.patterns() {
        let x = p.spins();
        for l in 0..len {
            for m in 0..len {
                if l != m {
                    weights[l * len + m] += f64::from(x[l] * x[m]);
                }
            }
        }
    }
    let scale = 1.0 / (len as f64 * patterns.count() as f64);
    weights.iter_mut().for_each(|w| *w *= scale);
    CouplingMatrix::from_weights(len, weights, beta)
}

fn loss_and_gradient(couplings: &CouplingMatrix, patterns: &PatternSet, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    couplings.check_len(patterns.pattern_len())?;
    let len = couplings.len;
    let beta = couplings.beta;
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![0.0; len * len] } else { Vec::new() };
    for p in patterns.patterns() {
        let x = p.spins();
        let fields = couplings.raw_fields(x);
        for l in 0..len {
            let f = beta * fields[l];
            let xl = f64::from(x[l]);
            loss += xl * f - log_2cosh(f);
            if want_grad {
                // d/dW[l][m] of the bracket is beta x_m (x_l - tanh f).
                let resid = beta * (xl - f.tanh());
                let row = &mut grad[l * len..(l + 1) * len];
                for (g, xm) in row.iter_mut().zip(x) {
                    *g += resid * f64::from(*xm);
                }
            }
        }
    }
    let scale = -1.0 / patterns.count() as f64;
    if want_grad {
        grad.iter_mut().for_each(|g| *g *= scale);
        for l in 0..len {
            grad[l * len + l] = 0.0;
        }
    }
    Ok((loss * scale, grad))
}

/// Negative log pseudo-likelihood averaged over patterns.
pub fn pl_loss(couplings: &CouplingMatrix, patterns: &PatternSet) -> Result<f64> {
    loss_and_gradient(couplings, patterns, false).map(|(l, _)| l)
}

/// Analytic gradient of [`pl_loss`] with respect to `W` (row-major, zero diagonal).
pub fn pl_gradient(couplings: &CouplingMatrix, patterns: &PatternSet) -> Result<Vec<f64>> {
    loss_and_gradient(couplings, patterns, true).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmTrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub tol: f64,
    pub beta: f64,
}

impl Default for AmTrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, max_epochs: 10_000, tol: 1e-8, beta: 1.0 }
    }
}

/// Full-batch gradient descent on the pseudo-likelihood from `W = 0`.
///
/// Returns the couplings and the loss after every epoch. Training stops after
/// `max_epochs` or once consecutive losses differ by less than `tol`.
pub fn train_pl(patterns: &PatternSet, config: &AmTrainConfig) -> Result<(CouplingMatrix, Vec<f64>)> {
    if config.learning_rate.is_nan() || config.learning_rate <= 0.0 || config.max_epochs == 0 {
        return Err(Error::InvalidArgument(
            "training needs a positive learning rate and at least one epoch".into(),
        ));
    }
    let mut couplings = CouplingMatrix::zeros(patterns.pattern_len(), config.beta)?;
    let (mut prev, mut grad) = loss_and_gradient(&couplings, patterns, true)?;
    let mut trace = Vec::new();
    for epoch in 1..=config.max_epochs {
        couplings.descend(&grad, config.learning_rate);
        let (loss, next_grad) = loss_and_gradient(&couplings, patterns, true)?;
        if !loss.is_finite() || couplings.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch, loss });
        }
        trace.push(loss);
        if (prev - loss).abs() < config.tol {
            break;
        }
        prev = loss;
        grad = next_grad;
    }
    Ok((couplings, trace))
}

/// `P(s_site = +1 | rest)` under the logistic conditional.
pub fn conditional_prob(state: &SpinPattern, site: usize, couplings: &CouplingMatrix) -> Result<f64> {
    couplings.check_len(state.len())?;
    if site >= state.len() {
        return Err(Error::IndexOutOfRange { index: site, len: state.len() });
    }
    let row = &couplings.weights[site * couplings.len..(site + 1) * couplings.len];
    let h: f64 = row.iter().zip(state.spins()).map(|(w, s)| w * f64::from(*s)).sum();
    Ok(sigmoid(2.0 * couplings.beta * h))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-site margins `x_l * sum_m W[l][m] x_m` (raw fields, `beta` factored out).
pub fn margin_report(pattern: &SpinPattern, couplings: &CouplingMatrix) -> Result<MarginReport> {
    couplings.check_len(pattern.len())?;
    let per_site_margins: Vec<f64> = couplings
        .raw_fields(pattern.spins())
        .iter()
        .zip(pattern.spins())
        .map(|(h, x)| h * f64::from(*x))
        .collect();
    let min_margin = per_site_margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(MarginReport { separable: min_margin > 0.0, min_margin, per_site_margins })
}

/// Synchronous sign update; a zero field keeps the current spin.
pub fn update_deterministic(state: &SpinPattern, couplings: &CouplingMatrix) -> Result<SpinPattern> {
    couplings.check_len(state.len())?;
    let spins = couplings
        .raw_fields(state.spins())
        .iter()
        .zip(state.spins())
        .map(|(h, s)| match h.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 1,
            Some(std::cmp::Ordering::Less) => -1,
            _ => *s,
        })
        .collect();
    Ok(SpinPattern { spins })
}

/// Synchronous resampling of every site from its logistic conditional.
pub fn update_stochastic<R: Rng + ?Sized>(
    state: &SpinPattern,
    couplings: &CouplingMatrix,
    rng: &mut R,
) -> Result<SpinPattern> {
    couplings.check_len(state.len())?;
    let beta = couplings.beta;
    let spins = couplings
        .raw_fields(state.spins())
        .iter()
        .map(|h| if rng.random::<f64>() < sigmoid(2.0 * beta * h) { 1 } else { -1 })
        .collect();
    Ok(SpinPattern { spins })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub state: SpinPattern,
    /// A fixed point was reached (the last update left the state unchanged).
    pub converged: bool,
    pub iters: usize,
}

/// Iterates the chosen dynamics from `start`.
///
/// Deterministic runs stop at a fixed point or, for synchronous dynamics, at a
/// detected 2-cycle (reported as not converged). Stochastic runs stop at the
/// first update that leaves the state unchanged.
pub fn retrieve<R: Rng + ?Sized>(
    start: &SpinPattern,
    couplings: &CouplingMatrix,
    dynamics: Dynamics,
    max_iters: usize,
    rng: &mut R,
) -> Result<Retrieval> {
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    let mut previous: Option<SpinPattern> = None;
    let mut state = start.clone();
    for iter in 1..=max_iters {
        let next = match dynamics {
            Dynamics::Deterministic => update_deterministic(&state, couplings)?,
            Dynamics::Stochastic => update_stochastic(&state, couplings, rng)?,
        };
        if next == state {
            return Ok(Retrieval { state: next, converged: true, iters: iter });
        }
        if dynamics == Dynamics::Deterministic && previous.as_ref() == Some(&next) {
            return Ok(Retrieval { state: next, converged: false, iters: iter });
        }
        previous = Some(std::mem::replace(&mut state, next));
    }
    Ok(Retrieval { state, converged: false, iters: max_iters })
}

/// Flip-fraction grid probed by [`basin_radius`].
pub const BASIN_GRID: [f64; 10] = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50];

const BASIN_SUCCESS: f64 = 0.95;
const BASIN_MAX_ITERS: usize = 100;

/// Number of sites flipped for a corruption level, `ceil(level * len)`.
pub fn flip_count(level: f64, len: usize) -> usize {
    ((level * len as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Empirical basin radius: the largest grid flip-fraction, scanning upward
/// from 0.05 and stopping at the first failure, at which at least 95% of
/// deterministic retrievals return exactly `pattern`. Zero when `pattern` is
/// not a fixed point or the first level already fails.
pub fn basin_radius<R: Rng + ?Sized>(
    pattern: &SpinPattern,
    couplings: &CouplingMatrix,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if update_deterministic(pattern, couplings)? != *pattern {
        return Ok(0.0);
    }
    let base = rng.random::<u64>();
    let mut radius = 0.0;
    for (level_idx, &level) in BASIN_GRID.iter().enumerate() {
        let flips = flip_count(level, pattern.len());
        let level_seed = seed::derive(base, "basin-level", level_idx as u64);
        let successes: usize = (0..trials)
            .into_par_iter()
            .map(|trial| -> Result<usize> {
                let mut trng = seed::stream(level_seed, "basin-trial", trial as u64);
                let start = pattern.with_flips(flips, &mut trng);
                let out = retrieve(&start, couplings, Dynamics::Deterministic, BASIN_MAX_ITERS, &mut trng)?;
                Ok(usize::from(out.state == *pattern))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        if (successes as f64) < BASIN_SUCCESS * trials as f64 {
            break;
        }
        radius = level;
    }
    Ok(radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_couplings(len: usize, beta: f64, scale: f64, r: &mut ChaCha8Rng) -> CouplingMatrix {
        let mut w: Vec<f64> = (0..len * len).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect();
        for l in 0..len {
            w[l * len + l] = 0.0;
        }
        CouplingMatrix::from_weights(len, w, beta).unwrap()
    }

    // Direct product of per-site conditionals, exp(x f) / (2 cosh f), evaluated naively.
    fn loss_oracle(c: &CouplingMatrix, ps: &PatternSet) -> f64 {
        let len = c.len();
        let mut total = 0.0;
        for p in ps.patterns() {
            let x = p.spins();
            let mut log_prod = 0.0;
            for l in 0..len {
                let mut f = 0.0;
                for m in 0..len {
                    if m != l {
                        f += c.weight(l, m) * f64::from(x[m]);
                    }
                }
                f *= c.beta();
                let psi = (f64::from(x[l]) * f).exp() / (2.0 * f.cosh());
                log_prod += psi.ln();
            }
            total += log_prod;
        }
        -total / ps.count() as f64
    }

    #[test]
    fn spin_pattern_validation() {
        assert!(SpinPattern::new(vec![1, 0, -1]).is_err());
        assert!(SpinPattern::new(vec![1]).is_err());
        assert!(PatternSet::new(vec![]).is_err());
        let a = SpinPattern::new(vec![1, -1]).unwrap();
        let b = SpinPattern::new(vec![1, -1, 1]).unwrap();
        assert!(matches!(PatternSet::new(vec![a, b]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn load_is_exact_ratio() {
        let ps = PatternSet::random(3, 12, &mut rng(1)).unwrap();
        assert_eq!(ps.load(), 3.0 / 12.0);
    }

    #[test]
    fn hebbian_single_pattern() {
        let ps = PatternSet::new(vec![SpinPattern::new(vec![1, 1]).unwrap()]).unwrap();
        let w = hebbian_couplings(&ps, 1.0).unwrap();
        assert_eq!(w.weights(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn hebbian_duplicates_and_brute_force() {
        let mut r = rng(2);
        let p = SpinPattern::random(6, &mut r).unwrap();
        let single = hebbian_couplings(&PatternSet::new(vec![p.clone()]).unwrap(), 1.0).unwrap();
        let triple = PatternSet::new(vec![p.clone(), p.clone(), p]).unwrap();
        let w3 = hebbian_couplings(&triple, 1.0).unwrap();
        assert_eq!(single, w3);

        let ps = PatternSet::random(3, 6, &mut r).unwrap();
        let w = hebbian_couplings(&ps, 1.0).unwrap();
        for l in 0..6 {
            for m in 0..6 {
                let mut brute = 0.0;
                if l != m {
                    for p in ps.patterns() {
                        brute += f64::from(p.spins()[l]) * f64::from(p.spins()[m]) / 18.0;
                    }
                }
                assert!((w.weight(l, m) - brute).abs() < 1e-15);
                assert_eq!(w.weight(l, m), w.weight(m, l));
            }
        }
    }

    #[test]
    fn loss_at_zero_is_l_log2() {
        let ps = PatternSet::random(3, 2, &mut rng(3)).unwrap();
        let w = CouplingMatrix::zeros(2, 1.0).unwrap();
        assert!((pl_loss(&w, &ps).unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_two_site_hand_value() {
        let w_val = 0.7;
        let c = CouplingMatrix::from_weights(2, vec![0.0, w_val, 0.0, 0.0], 1.0).unwrap();
        let ps = PatternSet::new(vec![SpinPattern::new(vec![1, 1]).unwrap()]).unwrap();
        // Site 0 sees field w, site 1 sees zero field.
        let expected = -((w_val - (2.0 * w_val.cosh()).ln()) + (0.0 - 2f64.ln()));
        assert!((pl_loss(&c, &ps).unwrap() - expected).abs() < 1e-14);

        // Symmetric single coupling: both sites see w.
        let c = CouplingMatrix::from_weights(2, vec![0.0, w_val, w_val, 0.0], 1.0).unwrap();
        let expected = -2.0 * (w_val - (2.0 * w_val.cosh()).ln());
        assert!((pl_loss(&c, &ps).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn loss_matches_product_oracle() {
        let mut r = rng(4);
        for _ in 0..20 {
            let c = random_couplings(6, 0.5 + r.random::<f64>(), 1.0, &mut r);
            let ps = PatternSet::random(3, 6, &mut r).unwrap();
            assert!((pl_loss(&c, &ps).unwrap() - loss_oracle(&c, &ps)).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let c = CouplingMatrix::zeros(4, 1.0).unwrap();
        let ps = PatternSet::random(2, 5, &mut rng(5)).unwrap();
        assert!(matches!(pl_loss(&c, &ps), Err(Error::DimensionMismatch { expected: 4, found: 5 })));
        assert!(pl_gradient(&c, &ps).is_err());
    }

    #[test]
    fn gradient_at_zero_is_negative_hebbian() {
        let mut r = rng(6);
        let ps = PatternSet::random(4, 7, &mut r).unwrap();
        for beta in [1.0, 2.5] {
            let g = pl_gradient(&CouplingMatrix::zeros(7, beta).unwrap(), &ps).unwrap();
            let heb = hebbian_couplings(&ps, 1.0).unwrap();
            for (gi, hi) in g.iter().zip(heb.weights()) {
                // hebbian carries 1/(L P); the gradient carries beta/P.
                let expected = -beta * hi * 7.0;
                assert!((gi - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(7);
        let h = 1e-5;
        for _ in 0..30 {
            let len = 2 + (r.random::<u32>() % 7) as usize;
            let p = 1 + (r.random::<u32>() % 4) as usize;
            let c = random_couplings(len, 1.0, 0.8, &mut r);
            let ps = PatternSet::random(p, len, &mut r).unwrap();
            let g = pl_gradient(&c, &ps).unwrap();
            for l in 0..len {
                for m in 0..len {
                    if l == m {
                        assert_eq!(g[l * len + m], 0.0);
                        continue;
                    }
                    let mut plus = c.weights().to_vec();
                    let mut minus = c.weights().to_vec();
                    plus[l * len + m] += h;
                    minus[l * len + m] -= h;
                    let lp = pl_loss(&CouplingMatrix::from_weights(len, plus, 1.0).unwrap(), &ps).unwrap();
                    let lm = pl_loss(&CouplingMatrix::from_weights(len, minus, 1.0).unwrap(), &ps).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let denom = fd.abs().max(g[l * len + m].abs()).max(1e-8);
                    assert!((fd - g[l * len + m]).abs() / denom < 1e-6, "fd {fd} vs {}", g[l * len + m]);
                }
            }
        }
    }

    #[test]
    fn wide_margin_pattern_contributes_almost_nothing() {
        let x = SpinPattern::new(vec![1, -1, 1, -1, 1, 1]).unwrap();
        let ps = PatternSet::new(vec![x]).unwrap();
        let mut heb = hebbian_couplings(&ps, 1.0).unwrap();
        // Scale so every margin is 5/6 * 30 = 25: penalty ~ 2 e^{-50}.
        heb.weights.iter_mut().for_each(|w| *w *= 30.0);
        let g = pl_gradient(&heb, &ps).unwrap();
        for gi in g {
            assert!(gi.abs() <= 1e-6);
        }
    }

    #[test]
    fn sign_symmetry_of_loss() {
        let mut r = rng(8);
        let c = random_couplings(5, 1.3, 1.0, &mut r);
        let ps = PatternSet::random(3, 5, &mut r).unwrap();
        let a = pl_loss(&c, &ps).unwrap();
        let b = pl_loss(&c, &ps.negated()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn conditional_prob_cases() {
        let mut r = rng(9);
        let s = SpinPattern::random(5, &mut r).unwrap();
        let zero = CouplingMatrix::zeros(5, 1.0).unwrap();
        for site in 0..5 {
            assert_eq!(conditional_prob(&s, site, &zero).unwrap(), 0.5);
        }
        assert!(matches!(conditional_prob(&s, 5, &zero), Err(Error::IndexOutOfRange { .. })));

        let c = random_couplings(5, 0.7, 1.0, &mut r);
        for site in 0..5 {
            let mut f = 0.0;
            for m in 0..5 {
                f += c.weight(site, m) * f64::from(s.spins()[m]);
            }
            f *= 0.7;
            let direct = f.exp() / (2.0 * f.cosh());
            assert!((conditional_prob(&s, site, &c).unwrap() - direct).abs() < 1e-14);
        }

        let big = CouplingMatrix::from_weights(2, vec![0.0, 1e3, 1e3, 0.0], 1.0).unwrap();
        let up = SpinPattern::new(vec![1, 1]).unwrap();
        assert_eq!(conditional_prob(&up, 0, &big).unwrap(), 1.0);
    }

    #[test]
    fn margins_hebbian_and_zero() {
        let x = SpinPattern::new(vec![1, -1, -1, 1]).unwrap();
        let ps = PatternSet::new(vec![x.clone()]).unwrap();
        let heb = hebbian_couplings(&ps, 1.0).unwrap();
        let rep = margin_report(&x, &heb).unwrap();
        for m in &rep.per_site_margins {
            assert!((m - 0.75).abs() < 1e-15);
        }
        assert!(rep.separable);
        let rep0 = margin_report(&x, &CouplingMatrix::zeros(4, 1.0).unwrap()).unwrap();
        assert!(rep0.per_site_margins.iter().all(|m| *m == 0.0));
        assert!(!rep0.separable);
        assert_eq!(rep0.min_margin, 0.0);
    }

    #[test]
    fn margins_are_flip_symmetric() {
        let mut r = rng(10);
        let ps = PatternSet::random(1, 12, &mut r).unwrap();
        let (c, _) = train_pl(&ps, &AmTrainConfig { max_epochs: 200, ..Default::default() }).unwrap();
        let x = &ps.patterns()[0];
        let a = margin_report(x, &c).unwrap();
        let b = margin_report(&x.negated(), &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_update_cases() {
        let mut r = rng(11);
        let s = SpinPattern::random(8, &mut r).unwrap();
        assert_eq!(update_deterministic(&s, &CouplingMatrix::zeros(8, 1.0).unwrap()).unwrap(), s);

        let x = SpinPattern::random(16, &mut r).unwrap();
        let heb = hebbian_couplings(&PatternSet::new(vec![x.clone()]).unwrap(), 1.0).unwrap();
        let noisy = x.with_flips(1, &mut r);
        assert_eq!(x.hamming(&noisy), 1);
        assert_eq!(update_deterministic(&noisy, &heb).unwrap(), x);
    }

    #[test]
    fn single_pattern_training_gives_fixed_point() {
        let ps = PatternSet::random(1, 16, &mut rng(12)).unwrap();
        let (c, trace) = train_pl(&ps, &AmTrainConfig::default()).unwrap();
        assert!(!trace.is_empty());
        let x = &ps.patterns()[0];
        assert_eq!(&update_deterministic(x, &c).unwrap(), x);
        for l in 0..16 {
            assert_eq!(c.weight(l, l), 0.0);
        }
    }

    #[test]
    fn training_stores_six_patterns_of_64() {
        let ps = PatternSet::random(6, 64, &mut rng(13)).unwrap();
        let (c, trace) = train_pl(&ps, &AmTrainConfig::default()).unwrap();
        for x in ps.patterns() {
            assert_eq!(&update_deterministic(x, &c).unwrap(), x);
            assert!(margin_report(x, &c).unwrap().min_margin > 0.0);
        }
        // Loss trace is non-increasing once smoothed over 10 epochs.
        let smooth: Vec<f64> = trace.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn first_step_from_zero_is_hebbian() {
        let ps = PatternSet::random(3, 9, &mut rng(14)).unwrap();
        let cfg = AmTrainConfig { max_epochs: 1, ..Default::default() };
        let (c, _) = train_pl(&ps, &cfg).unwrap();
        let heb = hebbian_couplings(&ps, 1.0).unwrap();
        for (w, h) in c.weights().iter().zip(heb.weights()) {
            assert!((w - 0.1 * h * 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn training_rejects_bad_config() {
        let ps = PatternSet::random(1, 4, &mut rng(15)).unwrap();
        assert!(train_pl(&ps, &AmTrainConfig { learning_rate: 0.0, ..Default::default() }).is_err());
        assert!(train_pl(&ps, &AmTrainConfig { max_epochs: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn training_reports_non_finite_loss() {
        let ps = PatternSet::random(2, 4, &mut rng(15)).unwrap();
        let cfg = AmTrainConfig { learning_rate: 1e308, max_epochs: 5, ..Default::default() };
        assert!(matches!(train_pl(&ps, &cfg), Err(Error::NonFiniteLoss { epoch: 1, .. })));
    }

    #[test]
    fn stochastic_update_zero_couplings_is_fair_coin() {
        let mut r = rng(16);
        let zero = CouplingMatrix::zeros(10, 3.0).unwrap();
        let s = SpinPattern::random(10, &mut r).unwrap();
        let draws = 10_000;
        let mut ups = 0usize;
        for _ in 0..draws {
            ups += update_stochastic(&s, &zero, &mut r).unwrap().spins().iter().filter(|x| **x == 1).count();
        }
        let n = (draws * 10) as f64;
        let sigma = (0.25 / n).sqrt();
        assert!((ups as f64 / n - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn stochastic_update_zero_temperature_limit() {
        let mut r = rng(17);
        let base = random_couplings(12, 1.0, 1.0, &mut r);
        let cold = CouplingMatrix::from_weights(12, base.weights().to_vec(), 1e6).unwrap();
        for _ in 0..50 {
            let s = SpinPattern::random(12, &mut r).unwrap();
            let det = update_deterministic(&s, &cold).unwrap();
            let sto = update_stochastic(&s, &cold, &mut r).unwrap();
            let fields = cold.raw_fields(s.spins());
            for l in 0..12 {
                if fields[l].abs() > 1e-3 {
                    assert_eq!(det.spins()[l], sto.spins()[l]);
                }
            }
        }
        let s = SpinPattern::random(12, &mut r).unwrap();
        let a = update_stochastic(&s, &base, &mut rng(99)).unwrap();
        let b = update_stochastic(&s, &base, &mut rng(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn retrieve_cases() {
        let mut r = rng(18);
        let x = SpinPattern::random(64, &mut r).unwrap();
        let heb = hebbian_couplings(&PatternSet::new(vec![x.clone()]).unwrap(), 1.0).unwrap();
        let out = retrieve(&x, &heb, Dynamics::Deterministic, 10, &mut r).unwrap();
        assert_eq!(out, Retrieval { state: x.clone(), converged: true, iters: 1 });

        let noisy = x.with_flips(flip_count(0.2, 64), &mut r);
        let out = retrieve(&noisy, &heb, Dynamics::Deterministic, 10, &mut r).unwrap();
        assert!(out.converged);
        assert_eq!(out.state, x);

        assert!(retrieve(&x, &heb, Dynamics::Deterministic, 0, &mut r).is_err());
    }

    #[test]
    fn retrieve_detects_two_cycle() {
        // Antiferromagnetic pair under synchronous updates: (+,+) -> (-,-) -> (+,+).
        let c = CouplingMatrix::from_weights(2, vec![0.0, -1.0, -1.0, 0.0], 1.0).unwrap();
        let s = SpinPattern::new(vec![1, 1]).unwrap();
        let out = retrieve(&s, &c, Dynamics::Deterministic, 50, &mut rng(0)).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iters, 2);
    }

    #[test]
    fn basin_radius_cases() {
        let mut r = rng(19);
        let x = SpinPattern::random(64, &mut r).unwrap();
        let heb = hebbian_couplings(&PatternSet::new(vec![x.clone()]).unwrap(), 1.0).unwrap();
        let a = basin_radius(&x, &heb, 40, &mut rng(5)).unwrap();
        let b = basin_radius(&x, &heb, 40, &mut rng(5)).unwrap();
        assert!(a >= 0.25, "radius {a}");
        assert_eq!(a, b);

        let other = SpinPattern::random(64, &mut r).unwrap();
        assert_eq!(basin_radius(&other, &heb, 10, &mut r).unwrap(), 0.0);
        assert!(basin_radius(&x, &heb, 0, &mut r).is_err());
    }

    #[test]
    fn checkpoint_rejects_nonzero_diagonal_and_truncation() {
        let text = "PLAM v1 L=2 beta=1.0\n0.5 0.1\n0.2 0.0\n";
        assert!(CouplingMatrix::parse_checkpoint(text).is_err());
        let text = "PLAM v1 L=2 beta=1.0\n0.0 0.1\n";
        assert!(matches!(CouplingMatrix::parse_checkpoint(text), Err(Error::Malformed { .. })));
        assert!(CouplingMatrix::parse_checkpoint("HOPF v1 L=2 beta=1\n").is_err());
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.plam");
        let c = random_couplings(7, 0.37, 3.0, &mut rng(20));
        c.save(&path).unwrap();
        assert_eq!(CouplingMatrix::load(&path).unwrap(), c);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_exact(seed in any::<u64>(), len in 2usize..9, beta in 1e-3f64..1e3) {
            let c = random_couplings(len, beta, 1e3, &mut rng(seed));
            let back = CouplingMatrix::parse_checkpoint(&c.to_checkpoint_string()).unwrap();
            prop_assert_eq!(back, c);
        }

        #[test]
        fn separable_patterns_are_fixed_points(seed in any::<u64>(), len in 3usize..12) {
            let mut r = rng(seed);
            let c = random_couplings(len, 1.0, 1.0, &mut r);
            let x = SpinPattern::random(len, &mut r).unwrap();
            if margin_report(&x, &c).unwrap().separable {
                prop_assert_eq!(update_deterministic(&x, &c).unwrap(), x);
            }
        }
    }
}
