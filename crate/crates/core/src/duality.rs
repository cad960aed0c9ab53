//! Gaussian-to-uniform duality.
//!
//! If `w ~ N(a * onehot(x), (1 - a^2) I_K)` then `argmax w` is categorical with
//! mixing parameter `T(a)`:
//!
//! `T(a) = K/(K-1) * ( ∫ φ(z - μ) Φ(z)^{K-1} dz - 1/K )`, `μ = a / sqrt(1 - a^2)`,
//!
//! with `φ`, `Φ` the standard normal density and distribution function. The
//! integral is evaluated by Gauss–Hermite quadrature after the substitution
//! `z = μ + sqrt(2) u`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_NODES: usize = 128;
pub const MIN_NODES: usize = 32;
/// Largest rule ever evaluated, including the doubled rule used for the error estimate.
pub const MAX_NODES: usize = 1024;
pub const TARGET_ERROR: f64 = 1e-8;
/// Added to the doubling difference so the estimate strictly bounds it.
const ERROR_FLOOR: f64 = 1e-14;
const RESCALE_AT: f64 = 1e150;

/// Standard normal distribution function via `erfc`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Orthonormal Hermite recurrence at `z`: returns `(p_n, p_n', ln scale)`
/// where the true values are the returned ones times `exp(ln scale)`.
///
/// The recurrence grows like `exp(z^2 / 2)` and would overflow for large
/// rules, so values are rescaled on the fly.
fn hermite_eval(z: f64, n: usize) -> (f64, f64, f64) {
    let mut p1 = std::f64::consts::PI.powf(-0.25);
    let mut p2 = 0.0;
    let mut log_scale = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
        if p1.abs() > RESCALE_AT {
            p1 /= RESCALE_AT;
            p2 /= RESCALE_AT;
            log_scale += RESCALE_AT.ln();
        }
    }
    (p1, (2.0 * n as f64).sqrt() * p2, log_scale)
}

/// Nodes and weights of the `n`-point Gauss–Hermite rule for `∫ e^{-u^2} f(u) du`,
/// nodes in decreasing order.
///
/// Starting points are the eigenvalues of the Jacobi matrix; each is polished
/// by Newton steps on the recurrence, which also yields the weight. Rules are
/// cached per size.
pub fn gauss_hermite(n: usize) -> Result<Arc<HermiteRule>> {
    if n == 0 || n > MAX_NODES {
        return Err(Error::InvalidArgument(format!("node count {n} outside 1..={MAX_NODES}")));
    }
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<HermiteRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(rule) = cache.lock().expect("rule cache poisoned").get(&n) {
        return Ok(Arc::clone(rule));
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64 / 2.0).sqrt() } else { 0.0 });
    let mut guesses: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    guesses.sort_by(|a, b| b.total_cmp(a));
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = guesses[i];
        let (mut derivative, mut log_scale) = (0.0, 0.0);
        for _ in 0..20 {
            let (p, dp, ls) = hermite_eval(z, n);
            (derivative, log_scale) = (dp, ls);
            let step = p / dp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        if n % 2 == 1 && i == n / 2 {
            z = 0.0;
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = (2f64.ln() - 2.0 * (derivative.abs().ln() + log_scale)).exp();
        weights[n - 1 - i] = weights[i];
    }
    let rule = Arc::new(HermiteRule { nodes, weights });
    cache.lock().expect("rule cache poisoned").insert(n, Arc::clone(&rule));
    Ok(rule)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn argmax_probability(mu: f64, k: usize, rule: &HermiteRule) -> f64 {
    let HermiteRule { nodes, weights } = rule;
    let exponent = (k - 1) as i32;
    let sum: f64 = nodes
        .iter()
        .zip(weights)
        .map(|(u, w)| w * normal_cdf(mu + std::f64::consts::SQRT_2 * u).powi(exponent))
        .sum();
    sum / std::f64::consts::PI.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdtResult {
    pub alpha_tilde: f64,
    pub alpha: f64,
    pub quadrature_nodes: usize,
    pub estimated_error: f64,
}

/// Evaluates the transformation with `nodes` and `2 * nodes` points and
/// returns the finer value, with the difference between the two as the error
/// estimate; the node count keeps doubling until the estimate drops to 1e-8.
pub fn gdt_transform(alpha_tilde: f64, k: usize, nodes: usize) -> Result<GdtResult> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("vocabulary size {k} must be at least 2")));
    }
    if nodes < MIN_NODES {
        return Err(Error::InvalidArgument(format!("at least {MIN_NODES} quadrature nodes required, got {nodes}")));
    }
    if !(0.0..1.0).contains(&alpha_tilde) {
        return Err(Error::InvalidArgument(format!("alpha_tilde {alpha_tilde} must lie in [0, 1)")));
    }
    let mu = alpha_tilde / (1.0 - alpha_tilde * alpha_tilde).sqrt();
    let scale = k as f64 / (k as f64 - 1.0);
    let to_alpha = |p: f64| scale * (p - 1.0 / k as f64);
    let mut n = nodes;
    let mut coarse = to_alpha(argmax_probability(mu, k, &*gauss_hermite(n)?));
    loop {
        if 2 * n > MAX_NODES {
            return Err(Error::QuadratureNonConvergence { estimate: f64::NAN, nodes: n });
        }
        let fine = to_alpha(argmax_probability(mu, k, &*gauss_hermite(2 * n)?));
        let estimated_error = (fine - coarse).abs() + ERROR_FLOOR;
        if estimated_error <= TARGET_ERROR {
            return Ok(GdtResult { alpha_tilde, alpha: fine.clamp(0.0, 1.0), quadrature_nodes: 2 * n, estimated_error });
        }
        if 4 * n > MAX_NODES {
            return Err(Error::QuadratureNonConvergence { estimate: estimated_error, nodes: 2 * n });
        }
        n *= 2;
        coarse = fine;
    }
}

/// Closed form for `K = 2`: `2 Φ(μ / sqrt 2) - 1`.
pub fn gdt_binary_closed_form(alpha_tilde: f64) -> f64 {
    let mu = alpha_tilde / (1.0 - alpha_tilde * alpha_tilde).sqrt();
    2.0 * normal_cdf(mu / std::f64::consts::SQRT_2) - 1.0
}

/// Draws `w ~ N(a onehot(x), (1 - a^2) I)` and returns its argmax (lowest index on ties).
pub fn gaussian_argmax_sample<R: Rng + ?Sized>(x: usize, alpha_tilde: f64, k: usize, rng: &mut R) -> usize {
    let sigma = (1.0 - alpha_tilde * alpha_tilde).max(0.0).sqrt();
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for j in 0..k {
        let noise: f64 = rng.sample(StandardNormal);
        let value = if j == x { alpha_tilde } else { 0.0 } + sigma * noise;
        if value > best_value {
            best = j;
            best_value = value;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualityRow {
    pub alpha_tilde: f64,
    pub k: usize,
    pub alpha_quadrature: f64,
    pub alpha_empirical: f64,
    /// Largest `|empirical - predicted|` frequency over all categories.
    pub max_abs_dev: f64,
    /// Three binomial standard deviations of the most variable category.
    pub three_sigma: f64,
    /// Chi-square p-value for equal frequencies among the non-`x` categories.
    pub exchangeability_p: f64,
    pub counts: Vec<u64>,
}

impl DualityRow {
    pub fn within_three_sigma(&self) -> bool {
        self.max_abs_dev <= self.three_sigma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualityReport {
    pub rows: Vec<DualityRow>,
}

impl DualityReport {
    pub fn all_within_three_sigma(&self) -> bool {
        self.rows.iter().all(DualityRow::within_three_sigma)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha_tilde,K,alpha_quadrature,alpha_empirical,max_abs_dev,three_sigma\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.alpha_tilde, r.k, r.alpha_quadrature, r.alpha_empirical, r.max_abs_dev, r.three_sigma
            );
        }
        out
    }
}

/// Chi-square p-value of `counts` against equal cell probabilities.
pub fn uniformity_p_value(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if counts.len() < 2 || total == 0 {
        return 1.0;
    }
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let chi = ChiSquared::new((counts.len() - 1) as f64).expect("positive degrees of freedom");
    1.0 - chi.cdf(stat)
}

/// Monte-Carlo check of the pushforward against the quadrature at every grid point.
///
/// The clean category is `x = 0`; grid point `i` uses the stream derived from
/// `(seed, "duality", i)` so the report is independent of scheduling.
pub fn verify_duality(grid: &[f64], k: usize, samples: usize, seed: u64) -> Result<DualityReport> {
    if samples < 10_000 {
        return Err(Error::InvalidArgument(format!("at least 10^4 samples required, got {samples}")));
    }
    let rows = grid
        .par_iter()
        .enumerate()
        .map(|(i, &alpha_tilde)| {
            let gdt = gdt_transform(alpha_tilde, k, DEFAULT_NODES)?;
            let mut rng = seed::stream(seed, "duality", i as u64);
            let mut counts = vec![0u64; k];
            for _ in 0..samples {
                counts[gaussian_argmax_sample(0, alpha_tilde, k, &mut rng)] += 1;
            }
            let n = samples as f64;
            let kf = k as f64;
            let alpha = gdt.alpha;
            let mut max_abs_dev = 0.0f64;
            let mut max_sigma = 0.0f64;
            for (j, &c) in counts.iter().enumerate() {
                let p = if j == 0 { alpha + (1.0 - alpha) / kf } else { (1.0 - alpha) / kf };
                max_abs_dev = max_abs_dev.max((c as f64 / n - p).abs());
                max_sigma = max_sigma.max((p * (1.0 - p) / n).sqrt());
            }
            let alpha_empirical = (counts[0] as f64 / n - 1.0 / kf) * kf / (kf - 1.0);
            Ok(DualityRow {
                alpha_tilde,
                k,
                alpha_quadrature: alpha,
                alpha_empirical,
                max_abs_dev,
                three_sigma: 3.0 * max_sigma,
                exchangeability_p: uniformity_p_value(&counts[1..]),
                counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DualityReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hermite_rule_integrates_moments() {
        for n in [32, 128, 512, 1024] {
            let rule = gauss_hermite(n).unwrap();
            let (x, w) = (&rule.nodes, &rule.weights);
            let m0: f64 = w.iter().sum();
            let m2: f64 = x.iter().zip(w).map(|(x, w)| w * x * x).sum();
            let m4: f64 = x.iter().zip(w).map(|(x, w)| w * x.powi(4)).sum();
            let sqrt_pi = std::f64::consts::PI.sqrt();
            assert!((m0 - sqrt_pi).abs() < 1e-12, "n={n} m0={m0}");
            assert!((m2 - sqrt_pi / 2.0).abs() < 1e-12, "n={n}");
            assert!((m4 - 0.75 * sqrt_pi).abs() < 1e-11, "n={n}");
        }
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        // Reference values from mpmath at 30 digits.
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((normal_cdf(-3.0) - 0.001_349_898_031_630_094_6).abs() < 1e-17);
    }

    #[test]
    fn zero_maps_to_zero() {
        for k in [2, 3, 16, 96] {
            let r = gdt_transform(0.0, k, DEFAULT_NODES).unwrap();
            assert!(r.alpha.abs() <= 1e-10, "K={k}: {}", r.alpha);
        }
    }

    #[test]
    fn near_one_concentrates() {
        for k in [2, 16] {
            assert!(gdt_transform(0.999_999, k, DEFAULT_NODES).unwrap().alpha >= 1.0 - 1e-3);
        }
        assert!(gdt_transform(1.0, 2, DEFAULT_NODES).is_err());
        assert!(gdt_transform(0.5, 2, 16).is_err());
        assert!(gdt_transform(0.5, 1, 64).is_err());
    }

    #[test]
    fn binary_case_matches_closed_form() {
        for i in 0..50 {
            let a = 0.99 * i as f64 / 49.0;
            let r = gdt_transform(a, 2, DEFAULT_NODES).unwrap();
            assert!((r.alpha - gdt_binary_closed_form(a)).abs() <= 1e-8, "a={a}");
        }
    }

    #[test]
    fn monotone_and_doubling_within_estimate() {
        for k in [2, 4, 16] {
            let mut last = -1.0;
            for i in 0..100 {
                let a = 0.995 * i as f64 / 99.0;
                let r = gdt_transform(a, k, DEFAULT_NODES).unwrap();
                assert!(r.alpha >= last - 1e-12);
                last = r.alpha;
                let doubled = gdt_transform(a, k, r.quadrature_nodes).unwrap();
                assert!((doubled.alpha - r.alpha).abs() < r.estimated_error);
            }
        }
    }

    #[test]
    fn argmax_sample_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = vec![0u64; 5];
        for _ in 0..100_000 {
            counts[gaussian_argmax_sample(2, 0.0, 5, &mut rng)] += 1;
        }
        assert!(uniformity_p_value(&counts) > 0.001);
        let hits = (0..10_000).filter(|_| gaussian_argmax_sample(1, 0.999_999, 4, &mut rng) == 1).count();
        assert!(hits >= 9_990);
    }

    #[test]
    fn report_is_reproducible_and_formatted() {
        let a = verify_duality(&[0.0, 0.6], 3, 20_000, 9).unwrap();
        let b = verify_duality(&[0.0, 0.6], 3, 20_000, 9).unwrap();
        assert_eq!(a, b);
        let csv = a.to_csv();
        assert!(csv.starts_with("alpha_tilde,K,alpha_quadrature,alpha_empirical,max_abs_dev,three_sigma\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(verify_duality(&[0.1], 3, 100, 9).is_err());
    }
}
