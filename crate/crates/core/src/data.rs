//! Validated domain types shared by every stage of the toolkit.
//!
//! A sample is represented only by its row of class probabilities; features
//! never enter the toolkit. Labels are 0-based class indices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum deviation below which a row is kept bit-for-bit.
const EXACT_ROW_TOL: f64 = 1e-12;
/// Row-sum deviation up to which a row is renormalized instead of rejected.
pub const ROW_SUM_TOL: f64 = 1e-6;
/// Row-sum tolerance for noise transition matrices.
pub const NOISE_ROW_TOL: f64 = 1e-8;

/// An `n x k` row-stochastic matrix of classifier outputs, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    n_rows: usize,
    n_classes: usize,
    entries: Vec<f64>,
}

impl ProbabilityMatrix {
    /// Validates a rectangular array of rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map(Vec::len).ok_or(Error::EmptyInput)?;
        let mut entries = Vec::with_capacity(rows.len() * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::RaggedRow {
                    row: i,
                    expected: k,
                    found: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Self::from_flat(rows.len(), k, entries)
    }

    /// Validates a flat row-major buffer of `n_rows * n_classes` entries.
    pub fn from_flat(n_rows: usize, n_classes: usize, mut entries: Vec<f64>) -> Result<Self> {
        if n_rows == 0 {
            return Err(Error::EmptyInput);
        }
        if n_classes < 2 {
            return Err(Error::TooFewClasses(n_classes));
        }
        if entries.len() != n_rows * n_classes {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {n_rows}x{n_classes} matrix",
                entries.len()
            )));
        }
        for (i, row) in entries.chunks_exact_mut(n_classes).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v < 0.0 {
                    return Err(Error::NegativeEntry {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
                if !(v <= 1.0) {
                    return Err(Error::EntryOutOfRange {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            let deviation = (sum - 1.0).abs();
            if deviation > ROW_SUM_TOL {
                return Err(Error::RowSumOutOfTolerance { row: i, sum });
            }
            if deviation > EXACT_ROW_TOL {
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        Ok(Self {
            n_rows,
            n_classes,
            entries,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.entries.chunks_exact(self.n_classes)
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut entries = Vec::with_capacity(indices.len() * self.n_classes);
        for &i in indices {
            entries.extend_from_slice(self.row(i));
        }
        Self {
            n_rows: indices.len(),
            n_classes: self.n_classes,
            entries,
        }
    }

    /// Index of the most probable class of each row (first on ties).
    pub fn argmax(&self) -> Vec<usize> {
        self.rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &p)| {
                        if p > best.1 {
                            (j, p)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// Free-function form of [`ProbabilityMatrix::from_rows`].
pub fn validate_probability_matrix(raw: &[Vec<f64>]) -> Result<ProbabilityMatrix> {
    ProbabilityMatrix::from_rows(raw)
}

pub(crate) fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().position(|&y| y >= k) {
        Some(index) => Err(Error::LabelOutOfRange {
            index,
            label: labels[index],
            k,
        }),
        None => Ok(()),
    }
}

/// Probability rows paired with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    probs: ProbabilityMatrix,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(probs: ProbabilityMatrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != probs.n_rows() {
            return Err(Error::LabelCountMismatch {
                labels: labels.len(),
                rows: probs.n_rows(),
            });
        }
        check_labels(&labels, probs.n_classes())?;
        Ok(Self { probs, labels })
    }

    pub fn probs(&self) -> &ProbabilityMatrix {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.n_classes()
    }

    /// Same probabilities, different labels (e.g. noisy instead of clean).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.probs.clone(), labels)
    }

    pub fn into_parts(self) -> (ProbabilityMatrix, Vec<usize>) {
        (self.probs, self.labels)
    }
}

/// Miscoverage `alpha` and confidence parameter `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageSpec {
    alpha: f64,
    delta: f64,
}

impl CoverageSpec {
    pub fn new(alpha: f64, delta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidAlpha(alpha));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidDelta(delta));
        }
        Ok(Self { alpha, delta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn level(&self) -> f64 {
        1.0 - self.alpha
    }

    /// `1 - alpha + correction`, rejected when it reaches 1.
    pub fn target_level(&self, correction: f64) -> Result<f64> {
        let level = 1.0 - self.alpha + correction;
        if level >= 1.0 {
            Err(Error::AdjustedLevelTooHigh(level))
        } else {
            Ok(level)
        }
    }
}

impl Default for CoverageSpec {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            delta: 0.001,
        }
    }
}

/// Label noise: `P(i, j) = p(noisy = j | clean = i)`.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// With probability `epsilon` the label is redrawn uniformly over all classes.
    Uniform { epsilon: f64 },
    General { matrix: DMatrix<f64> },
}

impl NoiseModel {
    pub fn uniform(epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(NoiseModel::Uniform { epsilon })
    }

    pub fn general(matrix: DMatrix<f64>) -> Result<Self> {
        validate_noise_matrix(&matrix)?;
        Ok(NoiseModel::General { matrix })
    }

    /// The transition matrix for `k` classes.
    pub fn matrix(&self, k: usize) -> Result<DMatrix<f64>> {
        match self {
            NoiseModel::Uniform { epsilon } => Ok(uniform_matrix(*epsilon, k)),
            NoiseModel::General { matrix } => {
                if matrix.nrows() != k {
                    return Err(Error::DimensionMismatch(format!(
                        "noise matrix is {}x{}, data has {k} classes",
                        matrix.nrows(),
                        matrix.ncols()
                    )));
                }
                Ok(matrix.clone())
            }
        }
    }

    pub fn uniform_epsilon(&self) -> Option<f64> {
        match self {
            NoiseModel::Uniform { epsilon } => Some(*epsilon),
            NoiseModel::General { .. } => None,
        }
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if (0.0..1.0).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::EpsilonOutOfRange(epsilon))
    }
}

pub(crate) fn validate_noise_matrix(matrix: &DMatrix<f64>) -> Result<()> {
    let k = matrix.nrows();
    if k != matrix.ncols() {
        return Err(Error::InvalidNoiseMatrix(format!(
            "matrix is {}x{}, not square",
            k,
            matrix.ncols()
        )));
    }
    if k < 2 {
        return Err(Error::TooFewClasses(k));
    }
    for i in 0..k {
        let row = matrix.row(i);
        if let Some(v) = row.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidNoiseMatrix(format!(
                "row {i} has entry {v} below zero"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > NOISE_ROW_TOL {
            return Err(Error::InvalidNoiseMatrix(format!("row {i} sums to {sum}")));
        }
    }
    Ok(())
}

fn uniform_matrix(epsilon: f64, k: usize) -> DMatrix<f64> {
    let off = epsilon / k as f64;
    let diag = 1.0 - epsilon + off;
    let mut m = DMatrix::from_fn(k, k, |i, j| if i == j { diag } else { off });
    for i in 0..k {
        let head: f64 = (0..k - 1).map(|j| m[(i, j)]).sum();
        m[(i, k - 1)] = 1.0 - head;
    }
    m
}

/// Uniform noise written out as a general `k x k` transition matrix.
pub fn uniform_noise_as_matrix(epsilon: f64, k: usize) -> Result<NoiseModel> {
    check_epsilon(epsilon)?;
    if k < 2 {
        return Err(Error::TooFewClasses(k));
    }
    Ok(NoiseModel::General {
        matrix: uniform_matrix(epsilon, k),
    })
}
