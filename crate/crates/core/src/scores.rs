//! Conformity scores and prediction sets.
//!
//! Larger scores mean worse agreement between a probability row and a
//! candidate class. The prediction set at threshold `q` holds every class
//! whose score is at most `q`.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{self, DOMAIN_SCORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// One minus the class probability.
    Hps,
    /// Total probability of the classes at least as likely as the candidate.
    Aps,
    /// APS plus a penalty `a * max(0, rank - b)` on the candidate's rank.
    Raps,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Hps => "hps",
            ScoreKind::Aps => "aps",
            ScoreKind::Raps => "raps",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub kind: ScoreKind,
    /// RAPS penalty weight; ignored for other kinds.
    pub raps_a: f64,
    /// RAPS rank allowance; ignored for other kinds.
    pub raps_b: usize,
    /// Randomized APS: the candidate's own mass is scaled by `u ~ U[0, 1)`.
    pub randomized: bool,
    pub seed: u64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self::new(ScoreKind::Aps)
    }
}

impl ScoreParams {
    pub fn new(kind: ScoreKind) -> Self {
        Self {
            kind,
            raps_a: 0.1,
            raps_b: 1,
            randomized: false,
            seed: 0,
        }
    }

    pub fn raps(a: f64, b: usize) -> Self {
        Self {
            raps_a: a,
            raps_b: b,
            ..Self::new(ScoreKind::Raps)
        }
    }

    pub fn randomized_aps(seed: u64) -> Self {
        Self {
            randomized: true,
            seed,
            ..Self::new(ScoreKind::Aps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.randomized && self.kind != ScoreKind::Aps {
            return Err(Error::RandomizedUnsupported(self.kind));
        }
        if self.kind == ScoreKind::Raps && !(self.raps_a >= 0.0 && self.raps_a.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "RAPS penalty must be finite and non-negative, got {}",
                self.raps_a
            )));
        }
        Ok(())
    }

    /// Largest score any class can receive among `k` classes.
    pub fn upper_bound(&self, k: usize) -> f64 {
        match self.kind {
            ScoreKind::Hps | ScoreKind::Aps => 1.0,
            ScoreKind::Raps => 1.0 + self.raps_a * k.saturating_sub(self.raps_b) as f64,
        }
    }
}

/// Scores of every class for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ScoreVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Writes the score of every class of `row` into `out`.
///
/// `order` is scratch space reused across rows. Cumulative sums run in
/// descending-probability order, so a class's score does not depend on how
/// it was requested.
pub(crate) fn fill_scores(
    row: &[f64],
    sample: u64,
    params: &ScoreParams,
    out: &mut [f64],
    order: &mut Vec<usize>,
) {
    let k = row.len();
    if params.kind == ScoreKind::Hps {
        for (o, &p) in out.iter_mut().zip(row) {
            *o = 1.0 - p;
        }
        return;
    }

    order.clear();
    order.extend(0..k);
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));

    let mut cum = 0.0;
    let mut start = 0;
    while start < k {
        let p = row[order[start]];
        let strictly_above = cum;
        let mut end = start;
        while end < k && row[order[end]] == p {
            cum += p;
            end += 1;
        }
        for &class in &order[start..end] {
            out[class] = if params.randomized {
                let u = stream::uniform_at(params.seed, DOMAIN_SCORE, sample, class as u64);
                strictly_above + u * p
            } else if params.kind == ScoreKind::Raps {
                cum + params.raps_a * end.saturating_sub(params.raps_b) as f64
            } else {
                cum
            };
        }
        start = end;
    }
}

fn check_label(label: usize, k: usize) -> Result<()> {
    if label < k {
        Ok(())
    } else {
        Err(Error::LabelOutOfRange { index: 0, label, k })
    }
}

/// Score of `label` for a probability row treated as sample 0.
pub fn score(row: &[f64], label: usize, params: &ScoreParams) -> Result<f64> {
    score_for_sample(row, 0, label, params)
}

/// Score of `label`; `sample` addresses the random stream of randomized scores.
pub fn score_for_sample(row: &[f64], sample: u64, label: usize, params: &ScoreParams) -> Result<f64> {
    check_label(label, row.len())?;
    Ok(score_all_for_sample(row, sample, params)?[label])
}

pub fn score_all(row: &[f64], params: &ScoreParams) -> Result<ScoreVector> {
    score_all_for_sample(row, 0, params)
}

pub fn score_all_for_sample(row: &[f64], sample: u64, params: &ScoreParams) -> Result<ScoreVector> {
    params.validate()?;
    let mut out = vec![0.0; row.len()];
    fill_scores(row, sample, params, &mut out, &mut Vec::with_capacity(row.len()));
    Ok(ScoreVector(out))
}

/// Classes whose score is at most `q`, ascending.
pub fn prediction_set(row: &[f64], q: f64, params: &ScoreParams) -> Result<Vec<usize>> {
    prediction_set_for_sample(row, 0, q, params)
}

pub fn prediction_set_for_sample(
    row: &[f64],
    sample: u64,
    q: f64,
    params: &ScoreParams,
) -> Result<Vec<usize>> {
    let scores = score_all_for_sample(row, sample, params)?;
    Ok(set_from_scores(&scores, q))
}

pub(crate) fn set_from_scores(scores: &[f64], q: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= q)
        .map(|(j, _)| j)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: [f64; 3] = [0.5, 0.3, 0.2];

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn single_scores() {
        let hps = ScoreParams::new(ScoreKind::Hps);
        assert!(close(score(&P, 0, &hps).unwrap(), 0.5));
        let aps = ScoreParams::new(ScoreKind::Aps);
        assert!(close(score(&P, 1, &aps).unwrap(), 0.8));
        let raps = ScoreParams::raps(0.1, 1);
        assert!(close(score(&P, 1, &raps).unwrap(), 0.9));
    }

    #[test]
    fn label_out_of_range() {
        let err = score(&P, 3, &ScoreParams::default()).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, k: 3, .. }));
    }

    #[test]
    fn all_scores() {
        let hps = score_all(&P, &ScoreParams::new(ScoreKind::Hps)).unwrap();
        for (a, b) in hps.iter().zip([0.5, 0.7, 0.8]) {
            assert!(close(*a, b));
        }
        let aps = score_all(&P, &ScoreParams::new(ScoreKind::Aps)).unwrap();
        for (a, b) in aps.iter().zip([0.5, 0.8, 1.0]) {
            assert!(close(*a, b));
        }
    }

    #[test]
    fn aps_ties_include_every_tied_class() {
        let aps = score_all(&[0.4, 0.4, 0.2], &ScoreParams::new(ScoreKind::Aps)).unwrap();
        for (a, b) in aps.iter().zip([0.8, 0.8, 1.0]) {
            assert!(close(*a, b));
        }
    }

    #[test]
    fn randomized_aps_excludes_tied_classes_from_the_strict_sum() {
        let params = ScoreParams::randomized_aps(11);
        let row = [0.4, 0.4, 0.2];
        let s = score_all(&row, &params).unwrap();
        let u0 = stream::uniform_at(11, DOMAIN_SCORE, 0, 0);
        let u2 = stream::uniform_at(11, DOMAIN_SCORE, 0, 2);
        assert_eq!(s[0], u0 * 0.4);
        assert!(close(s[2], 0.8 + u2 * 0.2));
    }

    #[test]
    fn randomized_rejected_outside_aps() {
        let mut params = ScoreParams::new(ScoreKind::Hps);
        params.randomized = true;
        assert_eq!(
            score_all(&P, &params).unwrap_err(),
            Error::RandomizedUnsupported(ScoreKind::Hps)
        );
        params.kind = ScoreKind::Raps;
        assert!(score(&P, 0, &params).is_err());
    }

    #[test]
    fn randomized_with_unit_draw_is_deterministic_aps() {
        // u = 1 turns the strict sum plus p_y into the inclusive sum.
        let row = [0.1, 0.6, 0.3];
        let aps = score_all(&row, &ScoreParams::new(ScoreKind::Aps)).unwrap();
        let mut order = Vec::new();
        order.extend(0..3);
        order.sort_by(|&a: &usize, &b: &usize| row[b].total_cmp(&row[a]));
        let mut cum = 0.0;
        for &c in &order {
            let strictly_above = cum;
            cum += row[c];
            assert!(close(strictly_above + 1.0 * row[c], aps[c]));
        }
    }

    #[test]
    fn prediction_sets() {
        let hps = ScoreParams::new(ScoreKind::Hps);
        assert_eq!(prediction_set(&P, 0.7, &hps).unwrap(), vec![0, 1]);
        assert!(prediction_set(&P, 0.49, &hps).unwrap().is_empty());
        let aps = ScoreParams::new(ScoreKind::Aps);
        assert_eq!(prediction_set(&P, 1.0, &aps).unwrap(), vec![0, 1, 2]);
    }

    fn prob_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-3;
            let mut r: Vec<f64> = v.iter().map(|x| (x + 1e-3 / v.len() as f64) / s).collect();
            let head: f64 = r[..r.len() - 1].iter().sum();
            let last = r.len() - 1;
            r[last] = (1.0 - head).max(0.0);
            r
        })
    }

    fn any_params() -> impl Strategy<Value = ScoreParams> {
        prop_oneof![
            Just(ScoreParams::new(ScoreKind::Hps)),
            Just(ScoreParams::new(ScoreKind::Aps)),
            (0.0f64..0.5, 0usize..5).prop_map(|(a, b)| ScoreParams::raps(a, b)),
            any::<u64>().prop_map(ScoreParams::randomized_aps),
        ]
    }

    proptest! {
        #[test]
        fn sets_are_nested(row in prob_row(6), params in any_params(),
                           q1 in 0.0f64..1.5, dq in 0.0f64..1.0, sample in 0u64..100) {
            let small = prediction_set_for_sample(&row, sample, q1, &params).unwrap();
            let big = prediction_set_for_sample(&row, sample, q1 + dq, &params).unwrap();
            prop_assert!(small.iter().all(|c| big.contains(c)));
        }

        #[test]
        fn single_score_matches_vector(row in prob_row(7), params in any_params(), sample in 0u64..100) {
            let all = score_all_for_sample(&row, sample, &params).unwrap();
            for y in 0..row.len() {
                prop_assert_eq!(score_for_sample(&row, sample, y, &params).unwrap(), all[y]);
            }
        }

        #[test]
        fn aps_top_class_and_maximum(row in prob_row(8)) {
            let s = score_all(&row, &ScoreParams::new(ScoreKind::Aps)).unwrap();
            let max_p = row.iter().cloned().fold(f64::MIN, f64::max);
            let n_top = row.iter().filter(|&&p| p == max_p).count();
            let top = row.iter().position(|&p| p == max_p).unwrap();
            if n_top == 1 {
                prop_assert_eq!(s[top], max_p);
            }
            let sum: f64 = row.iter().sum();
            let max_s = s.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!((max_s - sum).abs() <= 1e-12);
        }

        #[test]
        fn raps_without_penalty_is_aps(row in prob_row(9), b in 0usize..10) {
            let aps = score_all(&row, &ScoreParams::new(ScoreKind::Aps)).unwrap();
            let raps = score_all(&row, &ScoreParams::raps(0.0, b)).unwrap();
            prop_assert_eq!(aps, raps);
        }

        #[test]
        fn score_ranges(row in prob_row(5), a in 0.0f64..1.0, b in 0usize..6) {
            let k = row.len();
            for s in score_all(&row, &ScoreParams::new(ScoreKind::Hps)).unwrap().iter() {
                prop_assert!((0.0..=1.0).contains(s));
            }
            for s in score_all(&row, &ScoreParams::raps(a, b)).unwrap().iter() {
                prop_assert!(*s >= 0.0 && *s <= 1.0 + a * k.saturating_sub(b) as f64 + 1e-12);
            }
        }
    }
}
