//! Conformal prediction with noisy calibration labels.
//!
//! The crate covers the whole pipeline: conformity scores ([`scores`]),
//! threshold calibration under uniform or class-conditional label noise
//! ([`calibrate`]), finite-sample correction terms ([`guarantees`]), a
//! synthetic data generator ([`synth`]) and a repeated-split evaluation
//! harness ([`harness`]).
//!
//! ```
//! use noisecp::{calibrate, data::validate_probability_matrix, LabeledSet};
//! use noisecp::scores::{ScoreKind, ScoreParams};
//!
//! let probs = validate_probability_matrix(&[
//!     vec![0.9, 0.1],
//!     vec![0.8, 0.2],
//!     vec![0.7, 0.3],
//!     vec![0.6, 0.4],
//! ])
//! .unwrap();
//! let calib = LabeledSet::new(probs, vec![0, 0, 1, 0]).unwrap();
//! let params = ScoreParams::new(ScoreKind::Hps);
//! let r = calibrate::nacp_uniform(&calib, 0.2, 0.2, &params).unwrap();
//! assert!((r.q - 0.4).abs() < 1e-12);
//! ```

pub mod calibrate;
pub mod data;
pub mod error;
pub mod guarantees;
pub mod harness;
pub mod scores;
pub mod stream;
pub mod synth;

pub use calibrate::{Breakpoints, CalibrationCurve, Method, ThresholdResult};
pub use data::{CoverageSpec, LabeledSet, NoiseModel, ProbabilityMatrix};
pub use error::{Error, Result};
pub use guarantees::{AdjustedLevel, ClassMarginals, CorrectionMethod, CorrectionTerm};
pub use scores::{ScoreKind, ScoreParams};
