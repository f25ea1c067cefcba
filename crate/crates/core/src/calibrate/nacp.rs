use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::curve::{Breakpoints, CalibrationCurve, CoverageEstimator, ScoreTable};
use super::inverse::invert_noise_matrix;
use super::{bounds_from_sorted, check_alpha, reaches, sorted_copy, Method, ThresholdResult};
use crate::data::{check_epsilon, LabeledSet};
use crate::error::{Error, Result};
use crate::scores::ScoreParams;

/// Which solution to take when the estimated coverage reaches the level at
/// several candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionRule {
    /// The first candidate whose estimate reaches the level.
    #[default]
    Minimal,
    /// The start of the last run of candidates that reach the level.
    Largest,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub breakpoints: Breakpoints,
    pub rule: SolutionRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub index: usize,
    /// No candidate inside the requested domain qualified.
    pub extended: bool,
}

/// Picks a breakpoint of `curve` whose `fc_hat` reaches `level`.
///
/// `domain` restricts the search to `[lo, hi]`; if nothing qualifies there
/// the search continues over every breakpoint `>= lo`.
pub fn select_threshold(
    curve: &CalibrationCurve,
    level: f64,
    domain: Option<(f64, f64)>,
    rule: SolutionRule,
) -> Result<Selection> {
    let (lo, hi) = domain.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let start = curve.breakpoints.partition_point(|&b| b < lo);
    let end = curve.breakpoints.partition_point(|&b| b <= hi);
    let ok = |i: usize| reaches(curve.fc_hat[i], level);

    let pick = |range: std::ops::Range<usize>| -> Option<usize> {
        match rule {
            SolutionRule::Minimal => range.clone().find(|&i| ok(i)),
            SolutionRule::Largest => {
                let last = range.clone().rev().find(|&i| ok(i))?;
                let mut first = last;
                while first > range.start && ok(first - 1) {
                    first -= 1;
                }
                Some(first)
            }
        }
    };

    if let Some(index) = pick(start..end.max(start)) {
        return Ok(Selection {
            index,
            extended: false,
        });
    }
    if let Some(index) = pick(start..curve.len()) {
        return Ok(Selection {
            index,
            extended: true,
        });
    }
    Err(Error::TargetLevelUnreachable {
        level,
        best: curve.fc_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0) {
        return Err(Error::InvalidArgument(format!("target level {level} is not positive")));
    }
    if level >= 1.0 {
        return Err(Error::AdjustedLevelTooHigh(level));
    }
    Ok(())
}

fn result_from(
    curve: &CalibrationCurve,
    selection: Selection,
    q1: f64,
    q2: f64,
    level: f64,
    method: Method,
) -> ThresholdResult {
    ThresholdResult {
        q: curve.breakpoints[selection.index],
        q1,
        q2,
        achieved_fc: curve.fc_hat[selection.index],
        method,
        target_level: level,
        breakpoint_count: curve.len(),
        search_extended: selection.extended,
    }
}

/// Noise-aware threshold for uniform label noise at coverage `1 - alpha`.
pub fn nacp_uniform(
    calib: &LabeledSet,
    epsilon: f64,
    alpha: f64,
    params: &ScoreParams,
) -> Result<ThresholdResult> {
    check_alpha(alpha)?;
    nacp_uniform_at(calib, epsilon, 1.0 - alpha, params, &SearchOptions::default())
}

/// Noise-aware threshold for uniform noise at an arbitrary target level
/// (e.g. `1 - alpha + correction`).
///
/// The search runs over `[q1, q2]`, the noisy-score quantiles that bracket
/// every exact solution.
pub fn nacp_uniform_at(
    calib: &LabeledSet,
    epsilon: f64,
    level: f64,
    params: &ScoreParams,
    options: &SearchOptions,
) -> Result<ThresholdResult> {
    check_epsilon(epsilon)?;
    check_level(level)?;
    let table = ScoreTable::new(calib.probs(), params)?;
    let rows: Vec<usize> = (0..calib.len()).collect();
    let curve = table.curve(
        &rows,
        calib.labels(),
        &CoverageEstimator::Uniform { epsilon },
        options.breakpoints,
    )?;
    let noisy = sorted_copy(&table.label_scores(&rows, calib.labels()))?;
    let (q1, q2) = bounds_from_sorted(&noisy, level, epsilon, calib.n_classes())?;
    let selection = select_threshold(&curve, level, Some((q1, q2)), options.rule)?;
    Ok(result_from(&curve, selection, q1, q2, level, Method::NacpUniform))
}

/// Noise-aware threshold for a known transition matrix `p`, where
/// `p[(i, j)] = p(noisy = j | clean = i)`.
pub fn nacp_general(
    calib: &LabeledSet,
    p: &DMatrix<f64>,
    alpha: f64,
    params: &ScoreParams,
) -> Result<ThresholdResult> {
    check_alpha(alpha)?;
    nacp_general_at(calib, p, 1.0 - alpha, params, &SearchOptions::default())
}

pub fn nacp_general_at(
    calib: &LabeledSet,
    p: &DMatrix<f64>,
    level: f64,
    params: &ScoreParams,
    options: &SearchOptions,
) -> Result<ThresholdResult> {
    check_level(level)?;
    if p.nrows() != calib.n_classes() {
        return Err(Error::DimensionMismatch(format!(
            "noise matrix is {}x{}, data has {} classes",
            p.nrows(),
            p.ncols(),
            calib.n_classes()
        )));
    }
    let inverse = invert_noise_matrix(p)?;
    let table = ScoreTable::new(calib.probs(), params)?;
    let rows: Vec<usize> = (0..calib.len()).collect();
    let curve = table.curve(
        &rows,
        calib.labels(),
        &CoverageEstimator::General {
            p_inverse: inverse.p_inverse,
        },
        options.breakpoints,
    )?;
    let selection = select_threshold(&curve, level, None, options.rule)?;
    let q1 = curve.breakpoints[0];
    let q2 = curve.breakpoints[curve.len() - 1];
    Ok(result_from(&curve, selection, q1, q2, level, Method::NacpGeneral))
}
