//! Empirical coverage curves over candidate thresholds.
//!
//! For a calibration set with noisy labels and a threshold `q`:
//! - `fn_hat(q)`: fraction of samples whose noisy-label score is `<= q`;
//! - `fr_hat(q)`: mean prediction-set size divided by `k`, i.e. the
//!   coverage of a uniformly random label;
//! - `fc_hat(q)`: the implied clean-label coverage. Under uniform noise it is
//!   `(fn_hat - eps * fr_hat) / (1 - eps)`; under a general transition
//!   matrix `P` it is `trace(M_q P^-1)` with
//!   `M_q(l, i) = (1/n) #{j : noisy_j = i, l in C_q(x_j)}`.
//!
//! All three only change where some class score crosses `q`, so the exact
//! candidate set is the union of the `n * k` class scores.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{check_epsilon, check_labels, LabeledSet, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::scores::{fill_scores, ScoreParams};

/// Which candidate thresholds a curve is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Breakpoints {
    /// Every distinct class score.
    Exact,
    /// `resolution` evenly spaced points spanning the observed scores.
    Grid { resolution: usize },
    /// Exact while `n * k <= budget`, otherwise a grid.
    Auto { budget: usize, resolution: usize },
}

impl Default for Breakpoints {
    fn default() -> Self {
        Breakpoints::Auto {
            budget: 10_000_000,
            resolution: 10_000,
        }
    }
}

impl Breakpoints {
    /// Grid resolution used for a calibration set of `n` rows and `k`
    /// classes, or `None` for exact breakpoints.
    pub fn grid_for(&self, n: usize, k: usize) -> Option<usize> {
        match *self {
            Breakpoints::Exact => None,
            Breakpoints::Grid { resolution } => Some(resolution),
            Breakpoints::Auto { budget, resolution } => (n * k > budget).then_some(resolution),
        }
    }

    pub fn mode_for(&self, n: usize, k: usize) -> BreakpointMode {
        match self.grid_for(n, k) {
            Some(_) => BreakpointMode::Grid,
            None => BreakpointMode::Exact,
        }
    }
}

/// The breakpoint scheme a curve actually used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakpointMode {
    Exact,
    Grid,
}

/// How clean coverage is inferred from the noisy-label statistics.
#[derive(Debug, Clone, PartialEq)]
pub enum CoverageEstimator {
    Uniform { epsilon: f64 },
    General { p_inverse: DMatrix<f64> },
}

impl CoverageEstimator {
    pub fn uniform(epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(CoverageEstimator::Uniform { epsilon })
    }
}

/// Estimated coverage functions tabulated at sorted breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub breakpoints: Vec<f64>,
    pub fn_hat: Vec<f64>,
    pub fr_hat: Vec<f64>,
    pub fc_hat: Vec<f64>,
    pub n: usize,
    pub k: usize,
    pub mode: BreakpointMode,
}

impl CalibrationCurve {
    pub fn len(&self) -> usize {
        self.breakpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.breakpoints.is_empty()
    }

    /// Index of the last breakpoint `<= q`.
    pub fn index_at(&self, q: f64) -> Option<usize> {
        self.breakpoints.partition_point(|&b| b <= q).checked_sub(1)
    }
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Class scores of every row of a probability matrix, plus their global
/// ascending order.
///
/// Sorting happens once; curves for any subset of rows (a calibration
/// split) are then a single linear sweep.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    n: usize,
    k: usize,
    scores: Vec<f64>,
    order: Vec<usize>,
    params: ScoreParams,
}

impl ScoreTable {
    /// Row `i` is scored as sample `i` for randomized scores.
    pub fn new(probs: &ProbabilityMatrix, params: &ScoreParams) -> Result<Self> {
        params.validate()?;
        let (n, k) = (probs.n_rows(), probs.n_classes());
        let mut scores = vec![0.0; n * k];
        let mut scratch = Vec::with_capacity(k);
        for (i, (row, out)) in probs.rows().zip(scores.chunks_exact_mut(k)).enumerate() {
            fill_scores(row, i as u64, params, out, &mut scratch);
        }
        let mut order: Vec<usize> = (0..n * k).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        Ok(Self {
            n,
            k,
            scores,
            order,
            params: *params,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_classes(&self) -> usize {
        self.k
    }

    pub fn params(&self) -> &ScoreParams {
        &self.params
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.k..(i + 1) * self.k]
    }

    /// Score of `labels[i]` for each row `i` in `rows`.
    pub fn label_scores(&self, rows: &[usize], labels: &[usize]) -> Vec<f64> {
        rows.iter().map(|&i| self.row(i)[labels[i]]).collect()
    }

    /// Size of the prediction set of row `i` at threshold `q`.
    pub fn set_size(&self, i: usize, q: f64) -> usize {
        self.row(i).iter().filter(|&&s| s <= q).count()
    }

    /// `fr_hat(q)` over `rows`, evaluated directly.
    pub fn random_label_coverage(&self, rows: &[usize], q: f64) -> f64 {
        let members: usize = rows.iter().map(|&i| self.set_size(i, q)).sum();
        members as f64 / (rows.len() * self.k) as f64
    }

    /// Coverage curve of the calibration rows `rows`, whose noisy labels are
    /// `labels[i]` (indexed by row, not by position in `rows`).
    pub fn curve(
        &self,
        rows: &[usize],
        labels: &[usize],
        estimator: &CoverageEstimator,
        breakpoints: Breakpoints,
    ) -> Result<CalibrationCurve> {
        if rows.is_empty() {
            return Err(Error::EmptyScoreList);
        }
        if labels.len() != self.n {
            return Err(Error::LabelCountMismatch {
                labels: labels.len(),
                rows: self.n,
            });
        }
        check_labels(labels, self.k)?;
        if let CoverageEstimator::General { p_inverse } = estimator {
            if p_inverse.nrows() != self.k || p_inverse.ncols() != self.k {
                return Err(Error::DimensionMismatch(format!(
                    "inverse noise matrix is {}x{}, data has {} classes",
                    p_inverse.nrows(),
                    p_inverse.ncols(),
                    self.k
                )));
            }
        }
        let mut member = vec![false; self.n];
        for &i in rows {
            if i >= self.n {
                return Err(Error::InvalidArgument(format!("row {i} out of range")));
            }
            member[i] = true;
        }
        let n_cal = member.iter().filter(|m| **m).count();
        if n_cal != rows.len() {
            return Err(Error::InvalidArgument("calibration rows repeat".into()));
        }

        let grid = breakpoints.grid_for(n_cal, self.k);
        let mut sweep = Sweep::new(n_cal, self.k, estimator);
        let entries = self
            .order
            .iter()
            .map(|&idx| (idx / self.k, idx % self.k, self.scores[idx]))
            .filter(|(row, _, _)| member[*row]);

        match grid {
            None => {
                let mut entries = entries.peekable();
                while let Some((row, class, s)) = entries.next() {
                    sweep.push(class, labels[row]);
                    if entries.peek().map_or(true, |next| next.2 != s) {
                        sweep.emit(s);
                    }
                }
            }
            Some(resolution) => {
                if resolution < 2 {
                    return Err(Error::InvalidArgument(
                        "grid resolution must be at least 2".into(),
                    ));
                }
                let (lo, hi) = rows
                    .iter()
                    .flat_map(|&i| self.row(i).iter().copied())
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                        (lo.min(s), hi.max(s))
                    });
                let step = (hi - lo) / (resolution - 1) as f64;
                let point = |g: usize| {
                    if g + 1 == resolution {
                        hi
                    } else {
                        lo + step * g as f64
                    }
                };
                let mut g = 0;
                for (row, class, s) in entries {
                    while s > point(g) {
                        sweep.emit(point(g));
                        g += 1;
                    }
                    sweep.push(class, labels[row]);
                }
                while g < resolution {
                    sweep.emit(point(g));
                    g += 1;
                }
            }
        }
        Ok(sweep.finish(if grid.is_some() {
            BreakpointMode::Grid
        } else {
            BreakpointMode::Exact
        }))
    }
}

struct Sweep<'a> {
    n: usize,
    k: usize,
    estimator: &'a CoverageEstimator,
    label_hits: usize,
    members: usize,
    trace: CompensatedSum,
    curve: CalibrationCurve,
}

impl<'a> Sweep<'a> {
    fn new(n: usize, k: usize, estimator: &'a CoverageEstimator) -> Self {
        Self {
            n,
            k,
            estimator,
            label_hits: 0,
            members: 0,
            trace: CompensatedSum::default(),
            curve: CalibrationCurve {
                breakpoints: Vec::new(),
                fn_hat: Vec::new(),
                fr_hat: Vec::new(),
                fc_hat: Vec::new(),
                n,
                k,
                mode: BreakpointMode::Exact,
            },
        }
    }

    /// Class `class` of a row with noisy label `label` enters the set.
    fn push(&mut self, class: usize, label: usize) {
        self.members += 1;
        if class == label {
            self.label_hits += 1;
        }
        if let CoverageEstimator::General { p_inverse } = self.estimator {
            self.trace.add(p_inverse[(label, class)]);
        }
    }

    fn emit(&mut self, q: f64) {
        let fn_hat = self.label_hits as f64 / self.n as f64;
        let fr_hat = self.members as f64 / (self.n * self.k) as f64;
        let fc_hat = match self.estimator {
            CoverageEstimator::Uniform { epsilon } => (fn_hat - epsilon * fr_hat) / (1.0 - epsilon),
            CoverageEstimator::General { .. } => self.trace.value() / self.n as f64,
        };
        self.curve.breakpoints.push(q);
        self.curve.fn_hat.push(fn_hat);
        self.curve.fr_hat.push(fr_hat);
        self.curve.fc_hat.push(fc_hat);
    }

    fn finish(mut self, mode: BreakpointMode) -> CalibrationCurve {
        self.curve.mode = mode;
        self.curve
    }
}

/// Coverage curve of a noisy-label calibration set under uniform noise.
pub fn build_curve(
    calib: &LabeledSet,
    epsilon: f64,
    params: &ScoreParams,
    breakpoints: Breakpoints,
) -> Result<CalibrationCurve> {
    let estimator = CoverageEstimator::uniform(epsilon)?;
    let table = ScoreTable::new(calib.probs(), params)?;
    let rows: Vec<usize> = (0..calib.len()).collect();
    table.curve(&rows, calib.labels(), &estimator, breakpoints)
}
