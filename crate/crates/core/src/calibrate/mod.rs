//! Threshold calibration: standard split conformal prediction, the
//! noise-aware threshold search for uniform label noise, and its extension
//! to a known noise transition matrix.
//!
//! Quantiles use the empirical-CDF convention: the `level` quantile of `n`
//! scores is the `ceil(n * level)`-th order statistic (clamped to `[1, n]`).
//! With this convention the noise-aware search at zero noise returns exactly
//! the standard threshold.

mod curve;
mod inverse;
mod nacp;

use serde::{Deserialize, Serialize};

use crate::data::check_epsilon;
use crate::error::{Error, Result};

pub use curve::{
    build_curve, BreakpointMode, Breakpoints, CalibrationCurve, CoverageEstimator, ScoreTable,
};
pub use inverse::{invert_matrix, invert_noise_matrix, InvertedNoise, CONDITION_LIMIT, PIVOT_EPS};
pub use nacp::{
    nacp_general, nacp_general_at, nacp_uniform, nacp_uniform_at, select_threshold, SearchOptions,
    Selection, SolutionRule,
};

/// Slack used whenever an estimated coverage is compared with a level.
pub const LEVEL_TOL: f64 = 1e-12;

pub(crate) fn reaches(value: f64, level: f64) -> bool {
    value >= level - LEVEL_TOL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Standard CP on clean labels.
    #[serde(rename = "standard_cp")]
    StandardCp,
    /// Standard CP applied as-is to noisy labels.
    #[serde(rename = "noisy_cp")]
    NoisyCp,
    #[serde(rename = "nacp_uniform")]
    NacpUniform,
    #[serde(rename = "nacp_general")]
    NacpGeneral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub q: f64,
    /// Lower end of the search domain.
    pub q1: f64,
    /// Upper end of the search domain.
    pub q2: f64,
    /// Estimated clean coverage at `q`.
    pub achieved_fc: f64,
    pub method: Method,
    pub target_level: f64,
    /// Number of candidate thresholds examined.
    pub breakpoint_count: usize,
    /// Set when no candidate inside `[q1, q2]` reached the level.
    pub search_extended: bool,
}

/// 1-based rank `r` of the order statistic that is the `level` quantile of
/// `n` values: the smallest `r` with `r / n` reaching `level`.
pub fn quantile_rank(n: usize, level: f64) -> usize {
    assert!(n > 0, "quantile of an empty sample");
    let nf = n as f64;
    let mut r = ((level - LEVEL_TOL) * nf).ceil().clamp(1.0, nf) as usize;
    while r > 1 && reaches((r - 1) as f64 / nf, level) {
        r -= 1;
    }
    while r < n && !reaches(r as f64 / nf, level) {
        r += 1;
    }
    r
}

/// Empirical `level` quantile of already sorted scores.
pub fn sorted_quantile(sorted: &[f64], level: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyScoreList);
    }
    Ok(sorted[quantile_rank(sorted.len(), level) - 1])
}

pub(crate) fn sorted_copy(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyScoreList);
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {s} is not a number")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// Standard CP threshold for clean calibration scores.
pub fn standard_cp(scores: &[f64], alpha: f64) -> Result<ThresholdResult> {
    check_alpha(alpha)?;
    cp_at_level(scores, 1.0 - alpha, Method::StandardCp)
}

/// The same computation on noisy-label scores, labelled as such.
pub fn noisy_cp(scores: &[f64], alpha: f64) -> Result<ThresholdResult> {
    check_alpha(alpha)?;
    cp_at_level(scores, 1.0 - alpha, Method::NoisyCp)
}

/// Empirical quantile at an arbitrary target level.
pub fn cp_at_level(scores: &[f64], level: f64, method: Method) -> Result<ThresholdResult> {
    let sorted = sorted_copy(scores)?;
    let q = sorted_quantile(&sorted, level)?;
    let covered = sorted.partition_point(|&s| s <= q);
    Ok(ThresholdResult {
        q,
        q1: q,
        q2: q,
        achieved_fc: covered as f64 / sorted.len() as f64,
        method,
        target_level: level,
        breakpoint_count: sorted.len(),
        search_extended: false,
    })
}

/// Quantile levels bracketing the noise-aware threshold for target `level`:
/// `level (1 - eps) / (1 - eps / k)` and `level + (1 - level) eps`.
pub fn bracket_levels(level: f64, epsilon: f64, k: usize) -> (f64, f64) {
    let kf = k as f64;
    let lower = level * (1.0 - epsilon) / (1.0 - epsilon / kf);
    let upper = level + (1.0 - level) * epsilon;
    (lower, upper)
}

/// Empirical quantiles of the noisy-label scores at the bracket levels.
pub fn search_bounds(noisy_scores: &[f64], alpha: f64, epsilon: f64, k: usize) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    check_epsilon(epsilon)?;
    let sorted = sorted_copy(noisy_scores)?;
    bounds_from_sorted(&sorted, 1.0 - alpha, epsilon, k)
}

pub(crate) fn bounds_from_sorted(
    sorted: &[f64],
    level: f64,
    epsilon: f64,
    k: usize,
) -> Result<(f64, f64)> {
    let (l1, l2) = bracket_levels(level, epsilon, k);
    Ok((sorted_quantile(sorted, l1)?, sorted_quantile(sorted, l2)?))
}
