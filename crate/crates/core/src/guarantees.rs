//! Finite-sample correction terms for noisy-label calibration.
//!
//! Each term `delta` is added to the target level: calibrating at
//! `1 - alpha + delta` restores a `1 - alpha` coverage guarantee. Three
//! corrections are available:
//!
//! - [`delta_nacp`]: DKW-based, `sqrt(log(4/d) / (2 n h^2))` with
//!   `h = (1 - eps) / (1 + eps)`. Holds for a `1 - d` fraction of noisy
//!   calibration sets and does not depend on the number of classes.
//! - [`delta_acnl`]: the ACNL bound, built from the order-statistic constant
//!   `c(n)`, the inverse backward noise matrix and the least common noisy
//!   class.
//! - [`delta_crcp`]: the CRCP bound, a weighted sum of per-class terms
//!   `b(n, j) = (1 - rho~_j)^n + sqrt(pi / (n rho~_j))`.
//!
//! The toolkit stores the forward matrix `P(i, j) = p(noisy = j | clean = i)`;
//! the backward matrices the ACNL and CRCP bounds need are derived from it
//! with Bayes' rule and the clean-label prior.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::invert_matrix;
use crate::data::{check_epsilon, validate_noise_matrix, CoverageSpec};
use crate::error::{Error, Result};
use crate::stream::{substream, DOMAIN_ORDER_STATS};

const MARGINAL_TOL: f64 = 1e-8;
/// Replications per random substream of the `c(n)` estimator.
const MC_BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMethod {
    Nacp,
    Acnl,
    Crcp,
}

/// Where the least-common-class size of the ACNL bound came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountsSource {
    /// Noisy-label counts of an actual calibration set.
    Observed,
    /// `floor(n * min rho~)` when no calibration set is at hand.
    Expected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTerm {
    pub method: CorrectionMethod,
    pub delta_value: f64,
    pub n: usize,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_conf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_n_std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_star: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts_source: Option<CountsSource>,
}

impl CorrectionTerm {
    fn bare(method: CorrectionMethod, delta_value: f64, n: usize, k: usize) -> Self {
        Self {
            method,
            delta_value,
            n,
            k,
            epsilon: None,
            delta_conf: None,
            h: None,
            mc_samples: None,
            c_n: None,
            c_n_std_error: None,
            n_star: None,
            counts_source: None,
        }
    }
}

/// Clean and noisy label marginals, plus optional observed noisy counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMarginals {
    pub rho: Vec<f64>,
    pub rho_tilde: Vec<f64>,
    pub noisy_counts: Option<Vec<usize>>,
}

impl ClassMarginals {
    /// Noisy marginals implied by the clean prior: `rho~ = rho^T P`.
    pub fn from_prior(rho: Vec<f64>, p: &DMatrix<f64>) -> Result<Self> {
        validate_noise_matrix(p)?;
        if rho.len() != p.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} prior entries for {} classes",
                rho.len(),
                p.nrows()
            )));
        }
        check_distribution(&rho, "clean prior")?;
        let k = rho.len();
        let rho_tilde = (0..k)
            .map(|j| (0..k).map(|i| rho[i] * p[(i, j)]).sum())
            .collect();
        Ok(Self {
            rho,
            rho_tilde,
            noisy_counts: None,
        })
    }

    pub fn uniform(p: &DMatrix<f64>) -> Result<Self> {
        let k = p.nrows();
        Self::from_prior(vec![1.0 / k as f64; k], p)
    }

    pub fn with_counts(mut self, counts: Vec<usize>) -> Result<Self> {
        if counts.len() != self.rho.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} noisy counts for {} classes",
                counts.len(),
                self.rho.len()
            )));
        }
        self.noisy_counts = Some(counts);
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.rho.len()
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.rho.len() != k || self.rho_tilde.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "marginals have {} / {} entries for {k} classes",
                self.rho.len(),
                self.rho_tilde.len()
            )));
        }
        check_distribution(&self.rho, "clean prior")?;
        check_distribution(&self.rho_tilde, "noisy marginal")
    }
}

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{what} has a negative entry")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > MARGINAL_TOL {
        return Err(Error::InvalidArgument(format!("{what} sums to {sum}")));
    }
    Ok(())
}

fn check_delta_conf(delta_conf: f64) -> Result<()> {
    if delta_conf > 0.0 && delta_conf < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidDelta(delta_conf))
    }
}

/// DKW-based correction for the uniform-noise estimator.
pub fn delta_nacp(n: usize, epsilon: f64, delta_conf: f64) -> Result<CorrectionTerm> {
    if n == 0 {
        return Err(Error::InvalidArgument("calibration size must be positive".into()));
    }
    check_epsilon(epsilon)?;
    check_delta_conf(delta_conf)?;
    let h = (1.0 - epsilon) / (1.0 + epsilon);
    let value = ((4.0 / delta_conf).ln() / (2.0 * n as f64 * h * h)).sqrt();
    Ok(CorrectionTerm {
        epsilon: Some(epsilon),
        delta_conf: Some(delta_conf),
        h: Some(h),
        ..CorrectionTerm::bare(CorrectionMethod::Nacp, value, n, 0)
    })
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// `max_i (i/n - u_(i))` for one draw of `n` sorted uniforms.
///
/// Sorted uniforms are generated directly as normalized partial sums of
/// `n + 1` standard exponentials.
fn max_order_gap<R: rand::Rng>(n: usize, rng: &mut R, partial: &mut Vec<f64>) -> f64 {
    partial.clear();
    let mut total = 0.0;
    for _ in 0..n {
        total += Distribution::<f64>::sample(&Exp1, rng);
        partial.push(total);
    }
    let total = total + Distribution::<f64>::sample(&Exp1, rng);
    let nf = n as f64;
    partial
        .iter()
        .enumerate()
        .map(|(i, s)| (i + 1) as f64 / nf - s / total)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `c(n) = E[max_i (i/n - u_(i))]` for `n` i.i.d. uniforms, by Monte Carlo.
///
/// Replications are split into fixed blocks with their own substreams and
/// reduced in block order, so the estimate depends only on the seed.
pub fn c_n_estimate(n: usize, mc_samples: usize, seed: u64) -> Result<McEstimate> {
    if n == 0 || mc_samples == 0 {
        return Err(Error::InvalidArgument(
            "c(n) needs n >= 1 and at least one replication".into(),
        ));
    }
    let blocks = mc_samples.div_ceil(MC_BLOCK);
    let partials: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, DOMAIN_ORDER_STATS, b as u64);
            let reps = MC_BLOCK.min(mc_samples - b * MC_BLOCK);
            let mut buf = Vec::with_capacity(n);
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..reps {
                let x = max_order_gap(n, &mut rng, &mut buf);
                sum += x;
                sum_sq += x * x;
            }
            (sum, sum_sq)
        })
        .collect();
    let (sum, sum_sq) = partials
        .iter()
        .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let m = mc_samples as f64;
    let mean = sum / m;
    let var = if mc_samples > 1 {
        ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error: (var / m).sqrt(),
        samples: mc_samples,
    })
}

/// Backward matrix `B(i, j) = p(clean = j | noisy = i) = P(j, i) rho_j / rho~_i`.
fn backward_matrix(p: &DMatrix<f64>, m: &ClassMarginals) -> Result<DMatrix<f64>> {
    let k = p.nrows();
    if let Some(class) = m.rho_tilde.iter().position(|&r| r <= 0.0) {
        return Err(Error::ZeroMarginal { class });
    }
    Ok(DMatrix::from_fn(k, k, |i, j| {
        p[(j, i)] * m.rho[j] / m.rho_tilde[i]
    }))
}

fn check_bound_inputs(n: usize, k: usize, p: &DMatrix<f64>, m: &ClassMarginals) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("calibration size must be positive".into()));
    }
    validate_noise_matrix(p)?;
    if p.nrows() != k {
        return Err(Error::DimensionMismatch(format!(
            "noise matrix is {}x{}, expected {k} classes",
            p.nrows(),
            p.ncols()
        )));
    }
    m.validate(k)
}

/// ACNL correction with a fresh Monte Carlo estimate of `c(n)`.
pub fn delta_acnl(
    n: usize,
    k: usize,
    p: &DMatrix<f64>,
    marginals: &ClassMarginals,
    mc_samples: usize,
    seed: u64,
) -> Result<CorrectionTerm> {
    check_bound_inputs(n, k, p, marginals)?;
    let c_n = c_n_estimate(n, mc_samples, seed)?;
    delta_acnl_with_cn(n, k, p, marginals, c_n)
}

/// ACNL correction reusing a precomputed `c(n)`.
pub fn delta_acnl_with_cn(
    n: usize,
    k: usize,
    p: &DMatrix<f64>,
    marginals: &ClassMarginals,
    c_n: McEstimate,
) -> Result<CorrectionTerm> {
    check_bound_inputs(n, k, p, marginals)?;
    let backward = backward_matrix(p, marginals)?;
    let v = invert_matrix(&backward)?.p_inverse;
    let off_diagonal = (0..k)
        .map(|i| (0..k).filter(|&l| l != i).map(|l| v[(i, l)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let shift: f64 = marginals
        .rho
        .iter()
        .zip(&marginals.rho_tilde)
        .map(|(a, b)| (a - b).abs())
        .sum();

    let (n_star, source) = match &marginals.noisy_counts {
        Some(counts) => {
            let (class, &min) = counts
                .iter()
                .enumerate()
                .min_by_key(|(_, c)| **c)
                .ok_or(Error::EmptyInput)?;
            if min == 0 {
                return Err(Error::ZeroClassCount { class });
            }
            (min, CountsSource::Observed)
        }
        None => {
            let (class, min_rho) = marginals
                .rho_tilde
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::INFINITY), |a, (i, r)| if r < a.1 { (i, r) } else { a });
            // Guard against rho~ landing a rounding error below an exact count.
            let expected = (n as f64 * min_rho + MARGINAL_TOL).floor() as usize;
            if expected == 0 {
                return Err(Error::ZeroClassCount { class });
            }
            (expected, CountsSource::Expected)
        }
    };

    let kf = k as f64;
    let ns = n_star as f64;
    let spread = (kf * kf * (PI / 2.0).sqrt())
        .min(1.0 / ns.sqrt() + (((2.0 * kf * kf).ln() + ns.ln()) / 2.0).sqrt());
    let value = c_n.mean + (2.0 * off_diagonal + shift) / ns.sqrt() * spread;
    Ok(CorrectionTerm {
        mc_samples: Some(c_n.samples),
        c_n: Some(c_n.mean),
        c_n_std_error: Some(c_n.std_error),
        n_star: Some(n_star),
        counts_source: Some(source),
        ..CorrectionTerm::bare(CorrectionMethod::Acnl, value, n, k)
    })
}

/// `b(n, j) = (1 - rho~_j)^n + sqrt(pi / (n rho~_j))`.
fn crcp_b(n: usize, rho_tilde: f64) -> f64 {
    (1.0 - rho_tilde).powf(n as f64) + (PI / (n as f64 * rho_tilde)).sqrt()
}

/// CRCP correction.
///
/// With `Q(j, i) = p(clean = j | noisy = i)`, `w1_i = Q^-1(i, i) rho_i - rho~_i`
/// and `w2_ij = rho_i Q^-1(j, i)`.
pub fn delta_crcp(
    n: usize,
    k: usize,
    p: &DMatrix<f64>,
    marginals: &ClassMarginals,
) -> Result<CorrectionTerm> {
    check_bound_inputs(n, k, p, marginals)?;
    let q = backward_matrix(p, marginals)?.transpose();
    let q_inv = invert_matrix(&q)?.p_inverse;
    let rho = &marginals.rho;
    let rho_tilde = &marginals.rho_tilde;
    let b: Vec<f64> = rho_tilde.iter().map(|&r| crcp_b(n, r)).collect();
    let value: f64 = (0..k)
        .map(|i| {
            let w1 = q_inv[(i, i)] * rho[i] - rho_tilde[i];
            let cross: f64 = (0..k)
                .filter(|&j| j != i)
                .map(|j| (rho[i] * q_inv[(j, i)]).abs() * b[j])
                .sum();
            w1.abs() * b[i] + cross
        })
        .sum();
    Ok(CorrectionTerm::bare(CorrectionMethod::Crcp, value, n, k))
}

/// Corrected target level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustedLevel {
    pub level: f64,
    /// The level reached 1: every prediction set must hold all classes.
    pub trivial_set: bool,
}

pub fn apply_correction(spec: &CoverageSpec, term: &CorrectionTerm) -> AdjustedLevel {
    adjust_level(spec.alpha(), term.delta_value)
}

pub fn adjust_level(alpha: f64, correction: f64) -> AdjustedLevel {
    let level = 1.0 - alpha + correction;
    AdjustedLevel {
        level,
        trivial_set: level >= 1.0,
    }
}
