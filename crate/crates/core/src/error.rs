use thiserror::Error;

use crate::scores::ScoreKind;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("input is empty")]
    EmptyInput,

    #[error("row {row} has {found} entries, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),

    #[error("entry ({row}, {col}) = {value} is negative")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("entry ({row}, {col}) = {value} is not a probability in [0, 1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },

    #[error("row {row} sums to {sum}, outside the 1e-6 tolerance")]
    RowSumOutOfTolerance { row: usize, sum: f64 },

    #[error("label {label} at index {index} is outside [0, {k})")]
    LabelOutOfRange { index: usize, label: usize, k: usize },

    #[error("{labels} labels for {rows} probability rows")]
    LabelCountMismatch { labels: usize, rows: usize },

    #[error("noise level {0} is outside [0, 1)")]
    EpsilonOutOfRange(f64),

    #[error("alpha {0} is outside (0, 1)")]
    InvalidAlpha(f64),

    #[error("confidence parameter delta {0} is outside (0, 1)")]
    InvalidDelta(f64),

    #[error("adjusted coverage level {0} is not below 1")]
    AdjustedLevelTooHigh(f64),

    #[error("invalid noise matrix: {0}")]
    InvalidNoiseMatrix(String),

    #[error("matrix is singular (pivot {pivot:e} below 1e-12)")]
    SingularMatrix { pivot: f64 },

    #[error("matrix is ill-conditioned (condition estimate {condition:e} > 1e10)")]
    IllConditioned { condition: f64 },

    #[error("score list is empty")]
    EmptyScoreList,

    #[error("coverage level {level} is never reached (best estimate {best})")]
    TargetLevelUnreachable { level: f64, best: f64 },

    #[error("randomized scores are only defined for APS, not {0}")]
    RandomizedUnsupported(ScoreKind),

    #[error("class {class} has no noisy calibration samples")]
    ZeroClassCount { class: usize },

    #[error("noisy-label marginal of class {class} is zero")]
    ZeroMarginal { class: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// Failures that come from the numbers rather than from malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularMatrix { .. }
                | Error::IllConditioned { .. }
                | Error::TargetLevelUnreachable { .. }
                | Error::ZeroClassCount { .. }
                | Error::ZeroMarginal { .. }
        )
    }
}
