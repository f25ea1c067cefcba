//! Repeated random-split evaluation.
//!
//! A pool of samples with clean and noisy labels is split many times into
//! calibration and test parts. Every method is calibrated on the calibration
//! part (noisy labels, except the oracle) and evaluated on the test part
//! against clean labels. Splits run in parallel, each with its own random
//! substream, and are aggregated in split order.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{
    bounds_from_sorted, invert_noise_matrix, quantile_rank, select_threshold, sorted_copy,
    CoverageEstimator, ScoreTable, SearchOptions,
};
use crate::data::{check_labels, LabeledSet, NoiseModel, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::guarantees::{
    adjust_level, c_n_estimate, delta_acnl_with_cn, delta_crcp, delta_nacp, ClassMarginals,
    McEstimate,
};
use crate::scores::{score_all_for_sample, ScoreKind, ScoreParams};
use crate::stream::{substream, DOMAIN_SPLIT};
use crate::synth::{generate, inject_noise, SynthConfig};

/// Threshold reported for a trivial (all-classes) prediction set.
pub const TRIVIAL_Q: f64 = f64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    /// Standard CP calibrated on clean labels.
    Oracle,
    /// Standard CP calibrated on noisy labels.
    NoisyCp,
    /// Noise-aware threshold at `1 - alpha`.
    NacpNoDelta,
    /// Noise-aware threshold at `1 - alpha + delta_nacp`.
    Nacp,
    /// Noise-aware threshold at `1 - alpha + delta_acnl`.
    AcnlAdjusted,
    /// Noise-aware threshold at `1 - alpha + delta_crcp`.
    CrcpAdjusted,
}

impl EvalMethod {
    pub const ALL: [EvalMethod; 6] = [
        EvalMethod::Oracle,
        EvalMethod::NoisyCp,
        EvalMethod::NacpNoDelta,
        EvalMethod::Nacp,
        EvalMethod::AcnlAdjusted,
        EvalMethod::CrcpAdjusted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMethod::Oracle => "oracle",
            EvalMethod::NoisyCp => "noisy_cp",
            EvalMethod::NacpNoDelta => "nacp_no_delta",
            EvalMethod::Nacp => "nacp",
            EvalMethod::AcnlAdjusted => "acnl_adjusted",
            EvalMethod::CrcpAdjusted => "crcp_adjusted",
        }
    }

    fn uses_curve(self) -> bool {
        !matches!(self, EvalMethod::Oracle | EvalMethod::NoisyCp)
    }
}

impl fmt::Display for EvalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "nrcp_no_delta" | "nrcp_nodelta" => return Ok(EvalMethod::NacpNoDelta),
            "acnl" => return Ok(EvalMethod::AcnlAdjusted),
            "crcp" => return Ok(EvalMethod::CrcpAdjusted),
            _ => {}
        }
        EvalMethod::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub methods: Vec<EvalMethod>,
    pub score: ScoreParams,
    pub alpha: f64,
    pub delta_conf: f64,
    pub noise: NoiseModel,
    pub split_fraction: f64,
    pub n_splits: usize,
    pub seed: u64,
    pub search: SearchOptions,
    /// Replications for the ACNL order-statistic constant.
    pub mc_samples: usize,
    /// Clean-label prior for the ACNL and CRCP corrections; uniform when absent.
    pub class_prior: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn new(noise: NoiseModel) -> Self {
        Self {
            methods: EvalMethod::ALL.to_vec(),
            score: ScoreParams::default(),
            alpha: 0.1,
            delta_conf: 0.001,
            noise,
            split_fraction: 0.5,
            n_splits: 1000,
            seed: 0,
            search: SearchOptions::default(),
            mc_samples: 10_000,
            class_prior: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods selected".into()));
        }
        if self.n_splits == 0 {
            return Err(Error::InvalidConfig("need at least one split".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if !(self.delta_conf > 0.0 && self.delta_conf < 1.0) {
            return Err(Error::InvalidDelta(self.delta_conf));
        }
        if self.methods.contains(&EvalMethod::Nacp) && self.noise.uniform_epsilon().is_none() {
            return Err(Error::InvalidConfig(
                "the nacp correction term is defined for uniform noise only".into(),
            ));
        }
        self.score.validate()
    }
}

/// Samples with both clean and noisy labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    probs: ProbabilityMatrix,
    clean: Vec<usize>,
    noisy: Vec<usize>,
}

impl Pool {
    pub fn new(probs: ProbabilityMatrix, clean: Vec<usize>, noisy: Vec<usize>) -> Result<Self> {
        for labels in [&clean, &noisy] {
            if labels.len() != probs.n_rows() {
                return Err(Error::LabelCountMismatch {
                    labels: labels.len(),
                    rows: probs.n_rows(),
                });
            }
            check_labels(labels, probs.n_classes())?;
        }
        Ok(Self { probs, clean, noisy })
    }

    /// Generates samples and corrupts their labels with the same seed.
    pub fn synthetic(config: &SynthConfig, noise: &NoiseModel) -> Result<Self> {
        let (probs, clean) = generate(config)?.into_parts();
        let noisy = inject_noise(&clean, config.k, noise, config.seed)?;
        Self::new(probs, clean, noisy)
    }

    pub fn probs(&self) -> &ProbabilityMatrix {
        &self.probs
    }

    pub fn clean(&self) -> &[usize] {
        &self.clean
    }

    pub fn noisy(&self) -> &[usize] {
        &self.noisy
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.n_classes()
    }
}

/// Coverage and mean set size of the sets `{y : S(x, y) <= q}` on `test`.
pub fn coverage_and_size(test: &LabeledSet, q: f64, params: &ScoreParams) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut covered, mut members) = (0usize, 0usize);
    for (i, (row, &y)) in test.probs().rows().zip(test.labels()).enumerate() {
        let scores = score_all_for_sample(row, i as u64, params)?;
        members += scores.iter().filter(|&&s| s <= q).count();
        covered += usize::from(scores[y] <= q);
    }
    let n = test.len() as f64;
    Ok((covered as f64 / n, members as f64 / n))
}

/// One method on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: EvalMethod,
    pub q: f64,
    pub target_level: f64,
    pub delta: Option<f64>,
    pub coverage: f64,
    pub size: f64,
    /// Coverage of the noisy test labels, as a diagnostic.
    pub noisy_coverage: f64,
    pub trivial_set: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub split: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub outcomes: Vec<MethodOutcome>,
    /// Whether `q_nacp <= q_noisy` agreed with `fr_hat(q_noisy) <= 1 - alpha`;
    /// evaluated under uniform noise when both thresholds were computed.
    pub order_check: Option<bool>,
}

impl SplitRecord {
    pub fn outcome(&self, method: EvalMethod) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: EvalMethod,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub size_mean: f64,
    pub size_std: f64,
    pub noisy_coverage_mean: f64,
    pub trivial_rate: f64,
    pub q_mean: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub n_pool: usize,
    pub k: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub alpha: f64,
    pub delta_conf: f64,
    pub epsilon: Option<f64>,
    pub score: ScoreKind,
    pub n_splits: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub methods: Vec<MethodSummary>,
    pub order_checks: usize,
    pub order_violations: usize,
    #[serde(skip)]
    pub splits: Vec<SplitRecord>,
}

impl TrialReport {
    pub fn summary(&self, method: EvalMethod) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Aligned plain-text table, one row per method.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let eps = self
            .epsilon
            .map_or_else(|| "matrix".to_string(), |e| format!("{e}"));
        let _ = writeln!(
            out,
            "k={} n_cal={} n_test={} alpha={} epsilon={} score={} splits={}",
            self.k, self.n_cal, self.n_test, self.alpha, eps, self.score, self.n_splits
        );
        let _ = writeln!(
            out,
            "{:<14} {:>9} {:>9} {:>10} {:>10} {:>9} {:>8} {:>8}",
            "method", "coverage", "cov_std", "size", "size_std", "noisy_cov", "trivial", "delta"
        );
        for m in &self.methods {
            let delta = m.delta.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
            let _ = writeln!(
                out,
                "{:<14} {:>9.4} {:>9.4} {:>10.3} {:>10.3} {:>9.4} {:>8.3} {:>8}",
                m.method.name(),
                m.coverage_mean,
                m.coverage_std,
                m.size_mean,
                m.size_std,
                m.noisy_coverage_mean,
                m.trivial_rate,
                delta
            );
        }
        if self.order_checks > 0 {
            let _ = writeln!(
                out,
                "threshold order check: {} of {} splits violated",
                self.order_violations, self.order_checks
            );
        }
        out
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Split-independent quantities shared by every split.
struct Shared<'a> {
    pool: &'a Pool,
    config: &'a ExperimentConfig,
    table: ScoreTable,
    n_cal: usize,
    estimator: Option<CoverageEstimator>,
    p: DMatrix<f64>,
    nacp_delta: Option<f64>,
    crcp_delta: Option<f64>,
    c_n: Option<McEstimate>,
}

impl Shared<'_> {
    fn marginals(&self) -> Result<ClassMarginals> {
        match &self.config.class_prior {
            Some(rho) => ClassMarginals::from_prior(rho.clone(), &self.p),
            None => ClassMarginals::uniform(&self.p),
        }
    }

    fn split_rows(&self, split: usize) -> (Vec<usize>, Vec<usize>) {
        let mut rng = substream(self.config.seed, DOMAIN_SPLIT, split as u64);
        let mut perm: Vec<usize> = (0..self.pool.len()).collect();
        perm.shuffle(&mut rng);
        let test = perm.split_off(self.n_cal);
        (perm, test)
    }

    fn evaluate(&self, rows: &[usize], q: f64) -> (f64, f64, f64) {
        let (mut clean, mut noisy, mut members) = (0usize, 0usize, 0usize);
        for &i in rows {
            let s = self.table.row(i);
            members += s.iter().filter(|&&v| v <= q).count();
            clean += usize::from(s[self.pool.clean[i]] <= q);
            noisy += usize::from(s[self.pool.noisy[i]] <= q);
        }
        let n = rows.len() as f64;
        (clean as f64 / n, members as f64 / n, noisy as f64 / n)
    }

    fn run_split(&self, split: usize) -> Result<SplitRecord> {
        let config = self.config;
        let level = 1.0 - config.alpha;
        let (cal, test) = self.split_rows(split);
        let noisy_sorted = sorted_copy(&self.table.label_scores(&cal, &self.pool.noisy))?;
        let q_noisy = noisy_sorted[quantile_rank(cal.len(), level) - 1];

        let curve = match &self.estimator {
            Some(est) => Some(self.table.curve(&cal, &self.pool.noisy, est, config.search.breakpoints)?),
            None => None,
        };
        let epsilon = config.noise.uniform_epsilon();
        let k = self.pool.n_classes();
        let noise_aware = |target: f64| -> Result<f64> {
            let curve = curve.as_ref().expect("curve built for noise-aware methods");
            let domain = match epsilon {
                Some(eps) => Some(bounds_from_sorted(&noisy_sorted, target, eps, k)?),
                None => None,
            };
            let sel = select_threshold(curve, target, domain, config.search.rule)?;
            Ok(curve.breakpoints[sel.index])
        };

        let mut outcomes = Vec::with_capacity(config.methods.len());
        let mut q_nacp_plain = None;
        for &method in &config.methods {
            let delta = match method {
                EvalMethod::Oracle | EvalMethod::NoisyCp | EvalMethod::NacpNoDelta => None,
                EvalMethod::Nacp => self.nacp_delta,
                EvalMethod::CrcpAdjusted => self.crcp_delta,
                EvalMethod::AcnlAdjusted => {
                    let mut counts = vec![0usize; k];
                    for &i in &cal {
                        counts[self.pool.noisy[i]] += 1;
                    }
                    let marginals = self.marginals()?.with_counts(counts)?;
                    let c_n = self.c_n.expect("c(n) computed for acnl");
                    Some(delta_acnl_with_cn(cal.len(), k, &self.p, &marginals, c_n)?.delta_value)
                }
            };
            let adjusted = adjust_level(config.alpha, delta.unwrap_or(0.0));
            let q = if adjusted.trivial_set {
                TRIVIAL_Q
            } else {
                match method {
                    EvalMethod::Oracle => {
                        let clean = sorted_copy(&self.table.label_scores(&cal, &self.pool.clean))?;
                        clean[quantile_rank(cal.len(), level) - 1]
                    }
                    EvalMethod::NoisyCp => q_noisy,
                    _ => noise_aware(adjusted.level)?,
                }
            };
            if method == EvalMethod::NacpNoDelta {
                q_nacp_plain = Some(q);
            }
            let (coverage, size, noisy_coverage) = self.evaluate(&test, q);
            outcomes.push(MethodOutcome {
                method,
                q,
                target_level: adjusted.level,
                delta,
                coverage,
                size,
                noisy_coverage,
                trivial_set: adjusted.trivial_set,
            });
        }

        let order_check = match (epsilon, q_nacp_plain) {
            (Some(_), Some(q_nacp)) => {
                let fr = self.table.random_label_coverage(&cal, q_noisy);
                Some((q_nacp <= q_noisy) == (fr <= level + crate::calibrate::LEVEL_TOL))
            }
            _ => None,
        };
        Ok(SplitRecord {
            split,
            n_cal: cal.len(),
            n_test: test.len(),
            outcomes,
            order_check,
        })
    }
}

/// Runs `config.n_splits` calibration/test splits of `pool`.
pub fn run_experiment(pool: &Pool, config: &ExperimentConfig) -> Result<TrialReport> {
    config.validate()?;
    let (n, k) = (pool.len(), pool.n_classes());
    if n < 2 {
        return Err(Error::InvalidArgument("pool needs at least two samples".into()));
    }
    let n_cal = ((n as f64 * config.split_fraction).round() as usize).clamp(1, n - 1);
    let p = config.noise.matrix(k)?;
    let uses_curve = config.methods.iter().any(|m| m.uses_curve());
    let estimator = if uses_curve {
        Some(match config.noise.uniform_epsilon() {
            Some(eps) => CoverageEstimator::uniform(eps)?,
            None => CoverageEstimator::General {
                p_inverse: invert_noise_matrix(&p)?.p_inverse,
            },
        })
    } else {
        None
    };
    let nacp_delta = match (config.methods.contains(&EvalMethod::Nacp), config.noise.uniform_epsilon()) {
        (true, Some(eps)) => Some(delta_nacp(n_cal, eps, config.delta_conf)?.delta_value),
        _ => None,
    };
    let mut shared = Shared {
        pool,
        config,
        table: ScoreTable::new(pool.probs(), &config.score)?,
        n_cal,
        estimator,
        p,
        nacp_delta,
        crcp_delta: None,
        c_n: None,
    };
    if config.methods.contains(&EvalMethod::CrcpAdjusted) {
        let m = shared.marginals()?;
        shared.crcp_delta = Some(delta_crcp(n_cal, k, &shared.p, &m)?.delta_value);
    }
    if config.methods.contains(&EvalMethod::AcnlAdjusted) {
        shared.c_n = Some(c_n_estimate(n_cal, config.mc_samples, config.seed)?);
    }

    let splits: Vec<SplitRecord> = (0..config.n_splits)
        .into_par_iter()
        .map(|s| shared.run_split(s))
        .collect::<Result<_>>()?;

    let methods = config
        .methods
        .iter()
        .map(|&method| {
            let rows = splits.iter().filter_map(move |r| r.outcome(method));
            let (coverage_mean, coverage_std) = mean_std(rows.clone().map(|o| o.coverage));
            let (size_mean, size_std) = mean_std(rows.clone().map(|o| o.size));
            let (noisy_coverage_mean, _) = mean_std(rows.clone().map(|o| o.noisy_coverage));
            let trivial = rows.clone().filter(|o| o.trivial_set).count();
            let finite: Vec<f64> = rows.clone().filter(|o| !o.trivial_set).map(|o| o.q).collect();
            let deltas: Vec<f64> = rows.clone().filter_map(|o| o.delta).collect();
            MethodSummary {
                method,
                coverage_mean,
                coverage_std,
                size_mean,
                size_std,
                noisy_coverage_mean,
                trivial_rate: trivial as f64 / splits.len() as f64,
                q_mean: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
                delta: (!deltas.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64),
            }
        })
        .collect();
    let checks: Vec<bool> = splits.iter().filter_map(|s| s.order_check).collect();
    Ok(TrialReport {
        n_pool: n,
        k,
        n_cal,
        n_test: n - n_cal,
        alpha: config.alpha,
        delta_conf: config.delta_conf,
        epsilon: config.noise.uniform_epsilon(),
        score: config.score.kind,
        n_splits: config.n_splits,
        seed: config.seed,
        split_fraction: config.split_fraction,
        methods,
        order_checks: checks.len(),
        order_violations: checks.iter().filter(|ok| !**ok).count(),
        splits,
    })
}
