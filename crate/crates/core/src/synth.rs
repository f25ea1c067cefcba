//! Synthetic classifier outputs and label-noise injection.
//!
//! Each sample draws a class from the prior, then logits
//! `z_j ~ N(mu * 1{j = y}, sigma^2)`, and the probability row is
//! `softmax(z)`. The rows are calibrated by construction, so oracle CP
//! covers at `1 - alpha` in expectation.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_labels, LabeledSet, NoiseModel, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::stream::{substream, DOMAIN_NOISE, DOMAIN_SYNTH};

const PRIOR_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub k: usize,
    pub n: usize,
    /// Clean-label prior; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_prior: Option<Vec<f64>>,
    /// Mean logit boost of the true class.
    pub signal_mu: f64,
    pub logit_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Uniform prior, `mu = 3`, `sigma = 1`.
    pub fn new(k: usize, n: usize, seed: u64) -> Self {
        Self {
            k,
            n,
            class_prior: None,
            signal_mu: 3.0,
            logit_sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("need k >= 2, got {}", self.k)));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("need n >= 1".into()));
        }
        if !self.signal_mu.is_finite() {
            return Err(Error::InvalidConfig(format!("signal_mu {} is not finite", self.signal_mu)));
        }
        if !(self.logit_sigma > 0.0 && self.logit_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "logit_sigma must be positive, got {}",
                self.logit_sigma
            )));
        }
        if let Some(prior) = &self.class_prior {
            if prior.len() != self.k {
                return Err(Error::InvalidConfig(format!(
                    "prior has {} entries, expected {}",
                    prior.len(),
                    self.k
                )));
            }
            if prior.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidConfig("prior entries must be non-negative".into()));
            }
            let sum: f64 = prior.iter().sum();
            if (sum - 1.0).abs() > PRIOR_TOL {
                return Err(Error::InvalidConfig(format!("prior sums to {sum}")));
            }
        }
        Ok(())
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Probability rows and clean labels. Sample `i` uses its own substream, so
/// the output does not depend on the number of workers.
pub fn generate(config: &SynthConfig) -> Result<LabeledSet> {
    config.validate()?;
    let (n, k) = (config.n, config.k);
    let prior = match &config.class_prior {
        Some(p) => WeightedIndex::new(p).map_err(|e| Error::InvalidConfig(e.to_string()))?,
        None => WeightedIndex::new(vec![1.0; k]).expect("uniform weights"),
    };
    let mut entries = vec![0.0; n * k];
    let labels: Vec<usize> = entries
        .par_chunks_mut(k)
        .enumerate()
        .map(|(i, row)| {
            let mut rng = substream(config.seed, DOMAIN_SYNTH, i as u64);
            let y = prior.sample(&mut rng);
            for (j, z) in row.iter_mut().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let mean = if j == y { config.signal_mu } else { 0.0 };
                *z = mean + config.logit_sigma * noise;
            }
            softmax_in_place(row);
            y
        })
        .collect();
    let probs = ProbabilityMatrix::from_flat(n, k, entries)?;
    LabeledSet::new(probs, labels)
}

/// Corrupts `labels` according to `noise`.
///
/// Uniform noise replaces a label, with probability `epsilon`, by a uniform
/// draw over all `k` classes (which may equal the original). A general
/// matrix draws the noisy label from row `y` of `P`.
pub fn inject_noise(labels: &[usize], k: usize, noise: &NoiseModel, seed: u64) -> Result<Vec<usize>> {
    check_labels(labels, k)?;
    match noise {
        NoiseModel::Uniform { epsilon } => {
            let epsilon = *epsilon;
            Ok(labels
                .par_iter()
                .enumerate()
                .map(|(i, &y)| {
                    let mut rng = substream(seed, DOMAIN_NOISE, i as u64);
                    if rng.random::<f64>() < epsilon {
                        rng.random_range(0..k)
                    } else {
                        y
                    }
                })
                .collect())
        }
        NoiseModel::General { .. } => {
            let p = noise.matrix(k)?;
            let rows = (0..k)
                .map(|i| WeightedIndex::new(p.row(i).iter().copied()))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidNoiseMatrix(e.to_string()))?;
            Ok(labels
                .par_iter()
                .enumerate()
                .map(|(i, &y)| rows[y].sample(&mut substream(seed, DOMAIN_NOISE, i as u64)))
                .collect())
        }
    }
}

/// `counts[(i, j)]` = number of samples with clean label `i` and noisy label `j`.
pub fn transition_counts(clean: &[usize], noisy: &[usize], k: usize) -> Result<DMatrix<usize>> {
    if clean.len() != noisy.len() {
        return Err(Error::LabelCountMismatch {
            labels: noisy.len(),
            rows: clean.len(),
        });
    }
    check_labels(clean, k)?;
    check_labels(noisy, k)?;
    let mut counts = DMatrix::zeros(k, k);
    for (&y, &t) in clean.iter().zip(noisy) {
        counts[(y, t)] += 1;
    }
    Ok(counts)
}

/// Fraction of positions where the two label vectors differ.
pub fn flip_rate(clean: &[usize], noisy: &[usize]) -> f64 {
    let flips = clean.iter().zip(noisy).filter(|(a, b)| a != b).count();
    flips as f64 / clean.len().max(1) as f64
}

/// Top-1 accuracy of the probability rows against the labels.
pub fn accuracy(set: &LabeledSet) -> f64 {
    let hits = set
        .probs()
        .argmax()
        .iter()
        .zip(set.labels())
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / set.len() as f64
}
