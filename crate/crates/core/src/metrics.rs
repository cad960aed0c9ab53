//! Recovery rates, conditional entropies and supporting statistics.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::uddm::{CategoricalDist, Denoiser, DiffusionSchedule, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryResult {
    /// Fraction of corrupted positions restored; `None` when nothing was corrupted.
    pub corrupted_rate: Option<f64>,
    pub total_rate: f64,
    pub num_corrupted: usize,
}

pub fn recovery(original: &TokenSequence, recovered: &TokenSequence, corrupted_mask: &[bool]) -> Result<RecoveryResult> {
    let len = original.len();
    for found in [recovered.len(), corrupted_mask.len()] {
        if found != len {
            return Err(Error::DimensionMismatch { expected: len, found });
        }
    }
    let mut hits = 0usize;
    let mut corrupted_hits = 0usize;
    let mut num_corrupted = 0usize;
    for ((a, b), &m) in original.tokens().iter().zip(recovered.tokens()).zip(corrupted_mask) {
        let hit = a == b;
        hits += usize::from(hit);
        if m {
            num_corrupted += 1;
            corrupted_hits += usize::from(hit);
        }
    }
    Ok(RecoveryResult {
        corrupted_rate: (num_corrupted > 0).then(|| corrupted_hits as f64 / num_corrupted as f64),
        total_rate: hits as f64 / len as f64,
        num_corrupted,
    })
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn token_entropy(dist: &CategoricalDist) -> f64 {
    let h: f64 = dist.probs().iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
    h.clamp(0.0, (dist.len() as f64).ln())
}

/// Per-position entropies of the denoiser's `x`-prediction and their sum.
pub fn sequence_entropy<D: Denoiser + ?Sized>(
    den: &D,
    z: &TokenSequence,
    t: f64,
    schedule: &DiffusionSchedule,
) -> Result<(Vec<f64>, f64)> {
    schedule.check_time(t)?;
    let per_token: Vec<f64> = den.predict_x(z, t, schedule)?.iter().map(token_entropy).collect();
    let total = per_token.iter().sum();
    Ok((per_token, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    /// Row-major `n_sequences x L` token entropies.
    pub per_token: Vec<Vec<f64>>,
    pub per_sequence: Vec<f64>,
    pub mean: f64,
    pub histogram: Histogram,
}

pub const ENTROPY_BIN_WIDTH: f64 = 0.25;

impl EntropyReport {
    /// Builds a report from per-sequence token entropies; the histogram covers
    /// sequence entropies in bins of 0.25 nats up to `max_value`.
    pub fn from_token_entropies(per_token: Vec<Vec<f64>>, max_value: f64) -> Self {
        let per_sequence: Vec<f64> = per_token.iter().map(|row| row.iter().sum()).collect();
        let mean = if per_sequence.is_empty() { f64::NAN } else { per_sequence.iter().sum::<f64>() / per_sequence.len() as f64 };
        let histogram = histogram(&per_sequence, ENTROPY_BIN_WIDTH, max_value);
        Self { per_token, per_sequence, mean, histogram }
    }

    /// Mean entropy per token over all sequences.
    pub fn mean_per_token(&self) -> f64 {
        let n: usize = self.per_token.iter().map(Vec::len).sum();
        self.per_token.iter().flatten().sum::<f64>() / n as f64
    }

    /// One row per sequence: `index,sequence_entropy,mean_token_entropy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,sequence_entropy,mean_token_entropy\n");
        for (i, (total, row)) in self.per_sequence.iter().zip(&self.per_token).enumerate() {
            let _ = writeln!(out, "{i},{total},{}", total / row.len() as f64);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyGap {
    pub mean_gap: f64,
    pub ks_statistic: f64,
}

/// `mean(synth) - mean(train)` and the two-sample Kolmogorov–Smirnov statistic.
pub fn entropy_gap(train: &[f64], synth: &[f64]) -> Result<EntropyGap> {
    if train.is_empty() || synth.is_empty() {
        return Err(Error::InvalidArgument("entropy gap needs two nonempty samples".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EntropyGap { mean_gap: mean(synth) - mean(train), ks_statistic: ks_statistic(train, synth) })
}

/// Largest gap between the two empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceCheck {
    pub entropy_exact: f64,
    pub formula_value: f64,
    pub abs_diff: f64,
}

/// Differential entropy of `N(0, H^{-1})` computed from the inverse covariance
/// (Cholesky), against `-(1/2) ln det H + (d/2) ln(2 pi e)` from the eigenvalues of `H`.
pub fn laplace_entropy_check(hessian: &DMatrix<f64>) -> Result<LaplaceCheck> {
    let d = hessian.nrows();
    if d == 0 || hessian.ncols() != d {
        return Err(Error::NotPositiveDefinite(format!("{}x{} is not a nonempty square matrix", d, hessian.ncols())));
    }
    let asym = (hessian - hessian.transpose()).amax();
    if asym > 1e-10 {
        return Err(Error::NotPositiveDefinite(format!("asymmetry {asym:e} exceeds 1e-10")));
    }
    let constant = 0.5 * d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();

    let eigen = hessian.clone().symmetric_eigen();
    if eigen.eigenvalues.iter().any(|l| *l <= 0.0) {
        return Err(Error::NotPositiveDefinite(format!("smallest eigenvalue {}", eigen.eigenvalues.min())));
    }
    let formula_value = -0.5 * eigen.eigenvalues.iter().map(|l| l.ln()).sum::<f64>() + constant;

    let covariance = hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorisation failed".into()))?
        .inverse();
    let cov_chol = covariance
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("covariance is not positive-definite".into()))?;
    let log_det_cov = 2.0 * cov_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let entropy_exact = constant + 0.5 * log_det_cov;

    Ok(LaplaceCheck { entropy_exact, formula_value, abs_diff: (entropy_exact - formula_value).abs() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
    /// Values at or above `max_value`.
    pub overflow: u64,
}

/// Right-open bins `[i w, (i+1) w)` covering `[0, max_value)`, plus an overflow bin.
/// Negative values land in the first bin.
pub fn histogram(values: &[f64], bin_width: f64, max_value: f64) -> Histogram {
    let bins = ((max_value / bin_width).ceil().max(0.0)) as usize;
    let mut counts = vec![0u64; bins];
    let mut overflow = 0;
    for &v in values {
        if v >= max_value || bins == 0 {
            overflow += 1;
        } else {
            let i = ((v / bin_width).floor().max(0.0) as usize).min(bins - 1);
            counts[i] += 1;
        }
    }
    Histogram { bin_width, counts, overflow }
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{c}", i as f64 * self.bin_width, (i + 1) as f64 * self.bin_width);
        }
        let _ = writeln!(out, "{},inf,{}", self.counts.len() as f64 * self.bin_width, self.overflow);
        out
    }
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; `NaN` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), found: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("rank correlation needs at least two points".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(tokens: &[usize], k: usize) -> TokenSequence {
        TokenSequence::new(tokens.to_vec(), k).unwrap()
    }

    #[test]
    fn recovery_counts() {
        let x = seq(&[0, 1, 2, 3, 0, 1, 2, 3], 4);
        let mut mask = vec![false; 8];
        for i in [0, 2, 4] {
            mask[i] = true;
        }
        let r = recovery(&x, &x, &mask).unwrap();
        assert_eq!((r.corrupted_rate, r.total_rate, r.num_corrupted), (Some(1.0), 1.0, 3));

        let mask: Vec<bool> = (0..8).map(|i| i < 4).collect();
        let y = seq(&[0, 1, 3, 0, 0, 1, 2, 3], 4);
        let r = recovery(&x, &y, &mask).unwrap();
        assert_eq!(r.corrupted_rate, Some(0.5));
        assert_eq!(r.total_rate, 0.75);

        let r = recovery(&x, &y, &[false; 8]).unwrap();
        assert_eq!(r.corrupted_rate, None);
        assert_eq!(r.total_rate, 0.75);
        assert!(recovery(&x, &y, &[false; 7]).is_err());
    }

    #[test]
    fn entropy_reference_values() {
        assert!((token_entropy(&CategoricalDist::uniform(4)) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(token_entropy(&CategoricalDist::one_hot(1, 4)), 0.0);
        let d = CategoricalDist::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((token_entropy(&d) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gap_cases() {
        let a = [0.1, 0.5, 0.9, 1.3];
        let g = entropy_gap(&a, &a).unwrap();
        assert_eq!((g.mean_gap, g.ks_statistic), (0.0, 0.0));
        let shifted: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        assert!((entropy_gap(&a, &shifted).unwrap().mean_gap - 1.0).abs() < 1e-15);
        assert_eq!(entropy_gap(&[0.0, 1.0], &[5.0, 6.0, 7.0]).unwrap().ks_statistic, 1.0);
        assert!(entropy_gap(&[], &a).is_err());
    }

    #[test]
    fn ks_matches_brute_force() {
        let a = [0.3, 0.1, 0.7, 0.7, 0.2];
        let b = [0.7, 0.5, 0.05];
        let cdf = |v: &[f64], x: f64| v.iter().filter(|y| **y <= x).count() as f64 / v.len() as f64;
        let brute = a.iter().chain(&b).map(|&x| (cdf(&a, x) - cdf(&b, x)).abs()).fold(0.0, f64::max);
        assert!((ks_statistic(&a, &b) - brute).abs() < 1e-15);
    }

    #[test]
    fn laplace_reference_values() {
        let r = laplace_entropy_check(&DMatrix::identity(2, 2)).unwrap();
        assert!((r.entropy_exact - 2.837_877_066_409_345_5).abs() < 1e-12);
        assert!(r.abs_diff <= 1e-10);
        let r = laplace_entropy_check(&DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert!((r.entropy_exact - 0.725_791_352_644_727_4).abs() < 1e-12);

        let h = DMatrix::from_row_slice(3, 3, &[3.0, 0.5, 0.1, 0.5, 2.0, 0.3, 0.1, 0.3, 1.5]);
        let base = laplace_entropy_check(&h).unwrap().entropy_exact;
        let scaled = laplace_entropy_check(&(h * 4.0)).unwrap().entropy_exact;
        assert!((base - scaled - 1.5 * 4f64.ln()).abs() < 1e-12);

        assert!(laplace_entropy_check(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(laplace_entropy_check(&DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0])).is_err());
    }

    #[test]
    fn histogram_cases() {
        let h = histogram(&[], 0.5, 1.0);
        assert_eq!((h.counts.clone(), h.overflow), (vec![0, 0], 0));
        let h = histogram(&[0.1, 0.1, 0.9], 0.5, 1.0);
        assert_eq!((h.counts.clone(), h.overflow), (vec![2, 1], 0));
        let h = histogram(&[0.5, 1.0, 3.0], 0.5, 1.0);
        assert_eq!((h.counts.clone(), h.overflow), (vec![0, 1], 2));
        assert_eq!(h.to_csv(), "bin_left,bin_right,count\n0,0.5,0\n0.5,1,1\n1,inf,2\n");
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // Ties: ranks of y are (1.5, 1.5, 3); Pearson of (1,2,3) with those is sqrt(3)/2.
        assert!((spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 9.0]).unwrap() - 0.75f64.sqrt()).abs() < 1e-15);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn entropy_bounds(weights in proptest::collection::vec(0.0f64..1.0, 2..20)) {
            prop_assume!(weights.iter().sum::<f64>() > 1e-6);
            let d = CategoricalDist::from_weights(weights).unwrap();
            let h = token_entropy(&d);
            prop_assert!(h >= 0.0 && h <= (d.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn histogram_conserves(values in proptest::collection::vec(-1.0f64..10.0, 0..200), w in 0.05f64..2.0, max in 0.1f64..8.0) {
            let h = histogram(&values, w, max);
            prop_assert_eq!(h.counts.iter().sum::<u64>() + h.overflow, values.len() as u64);
        }

        #[test]
        fn recovery_permutation_equivariant(tokens in proptest::collection::vec(0usize..5, 2..12), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = tokens.len();
            let other: Vec<usize> = tokens.iter().map(|t| if rand::Rng::random::<bool>(&mut rng) { *t } else { (t + 1) % 5 }).collect();
            let mask: Vec<bool> = (0..n).map(|_| rand::Rng::random::<bool>(&mut rng)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let a = recovery(&seq(&tokens, 5), &seq(&other, 5), &mask).unwrap();
            let pt: Vec<usize> = perm.iter().map(|&i| tokens[i]).collect();
            let po: Vec<usize> = perm.iter().map(|&i| other[i]).collect();
            let pm: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
            let b = recovery(&seq(&pt, 5), &seq(&po, 5), &pm).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
