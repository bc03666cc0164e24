//! Zero-shot scoring of an image against a list of text prompts and the two
//! selection rules applied to the resulting distribution.
//!
//! Probabilities are `softmax(logit_scale * <image, text_i>)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedding};
use crate::taxonomy::VocabularyCategory;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("dimension mismatch: image has {expected}, text has {actual}")]
    Dim { expected: usize, actual: usize },
    #[error("cannot score against an empty vocabulary")]
    EmptyVocabulary,
    #[error("k = {k} out of range for {n} entries")]
    Range { k: usize, n: usize },
    #[error("logit scale must be positive and finite, got {0}")]
    LogitScale(f64),
    #[error("threshold selection needs at least 2 entries, got {0}")]
    TooFewEntries(usize),
    #[error("invalid selection rule {0:?}; expected top:K or std:K")]
    Rule(String),
}

impl From<EmbedError> for ScoringError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Dim { expected, actual } => ScoringError::Dim { expected, actual },
            other => unreachable!("dot only fails on dimension: {other}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityDistribution {
    pub category: Option<VocabularyCategory>,
    pub probs: Vec<f64>,
}

impl ProbabilityDistribution {
    pub fn new(category: Option<VocabularyCategory>, probs: Vec<f64>) -> Self {
        ProbabilityDistribution { category, probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties go to the lower index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if best.is_none_or(|b| p > self.probs[b]) {
                best = Some(i);
            }
        }
        best
    }
}

/// Numerically stable softmax of `logits`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn score_probabilities(
    image: &Embedding,
    texts: &[Embedding],
    logit_scale: f64,
) -> Result<ProbabilityDistribution, ScoringError> {
    if texts.is_empty() {
        return Err(ScoringError::EmptyVocabulary);
    }
    if !(logit_scale.is_finite() && logit_scale > 0.0) {
        return Err(ScoringError::LogitScale(logit_scale));
    }
    let logits = texts
        .iter()
        .map(|t| image.dot(t).map(|s| s * logit_scale))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProbabilityDistribution::new(None, softmax(&logits)))
}

/// The `k` most probable indices, descending, ties by ascending index.
pub fn select_top_k(dist: &ProbabilityDistribution, k: usize) -> Result<Vec<usize>, ScoringError> {
    top_k_indices(&dist.probs, k)
}

pub fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>, ScoringError> {
    if k == 0 || k > values.len() {
        return Err(ScoringError::Range { k, n: values.len() });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps ascending index among equal values
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    Ok(order)
}

/// Whether probabilities are fractions (sum 1) or percentages (sum 100).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbabilityScale {
    Fraction,
    Percent,
}

impl ProbabilityScale {
    pub fn total(self) -> f64 {
        match self {
            ProbabilityScale::Fraction => 1.0,
            ProbabilityScale::Percent => 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdStats {
    /// `total / N`: the mean of any distribution over N entries.
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub threshold: f64,
}

pub fn threshold_stats(values: &[f64], scale: ProbabilityScale, k: f64) -> ThresholdStats {
    let n = values.len() as f64;
    let mean = scale.total() / n;
    let var = values.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    ThresholdStats {
        mean,
        std,
        threshold: mean + k * std,
    }
}

/// Values closer to the threshold than `THRESHOLD_EPS * total` count as on
/// it. A lone peak over a flat remainder has z-score exactly sqrt(N - 1), so
/// without this slack rounding would decide it differently per scale.
pub const THRESHOLD_EPS: f64 = 1e-12;

/// Indices with value strictly above `mean + k * std`, ascending.
pub fn indices_above_threshold(
    values: &[f64],
    scale: ProbabilityScale,
    k: f64,
) -> Result<Vec<usize>, ScoringError> {
    if values.len() < 2 {
        return Err(ScoringError::TooFewEntries(values.len()));
    }
    let stats = threshold_stats(values, scale, k);
    Ok(values
        .iter()
        .enumerate()
        .filter(|(_, &p)| p - stats.threshold > THRESHOLD_EPS * scale.total())
        .map(|(i, _)| i)
        .collect())
}

pub fn select_above_threshold(
    dist: &ProbabilityDistribution,
    k: f64,
) -> Result<Vec<usize>, ScoringError> {
    indices_above_threshold(&dist.probs, ProbabilityScale::Fraction, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SelectionRule {
    TopK(usize),
    MeanPlusKStd(f64),
}

impl SelectionRule {
    /// Selected indices in ascending vocabulary order.
    pub fn apply(&self, dist: &ProbabilityDistribution) -> Result<Vec<usize>, ScoringError> {
        let mut picked = match *self {
            SelectionRule::TopK(k) => select_top_k(dist, k)?,
            SelectionRule::MeanPlusKStd(k) => select_above_threshold(dist, k)?,
        };
        picked.sort_unstable();
        Ok(picked)
    }
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule::MeanPlusKStd(9.0)
    }
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionRule::TopK(k) => write!(f, "top:{k}"),
            SelectionRule::MeanPlusKStd(k) => write!(f, "std:{k}"),
        }
    }
}

impl FromStr for SelectionRule {
    type Err = ScoringError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ScoringError::Rule(s.to_string());
        let (kind, k) = s.split_once(':').ok_or_else(bad)?;
        match kind.trim() {
            "top" => {
                let k: usize = k.trim().parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                Ok(SelectionRule::TopK(k))
            }
            "std" => {
                let k: f64 = k.trim().parse().map_err(|_| bad())?;
                if !(k.is_finite() && k > 0.0) {
                    return Err(bad());
                }
                Ok(SelectionRule::MeanPlusKStd(k))
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for SelectionRule {
    type Error = ScoringError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<SelectionRule> for String {
    fn from(rule: SelectionRule) -> Self {
        rule.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(values: &[f64]) -> Embedding {
        Embedding::normalized(values).unwrap()
    }

    fn dist(probs: &[f64]) -> ProbabilityDistribution {
        ProbabilityDistribution::new(None, probs.to_vec())
    }

    #[test]
    fn orthogonal_pair_gives_analytic_softmax() {
        let image = unit(&[1.0, 0.0]);
        let texts = [unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let d = score_probabilities(&image, &texts, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((d.probs[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((d.probs[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((d.probs[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn identical_texts_give_uniform() {
        let image = unit(&[0.3, 0.4, 0.5]);
        let t = unit(&[0.1, 0.9, 0.2]);
        let d = score_probabilities(&image, &vec![t; 5], 100.0).unwrap();
        for p in d.probs {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn scoring_errors() {
        let image = unit(&[1.0, 0.0]);
        assert_eq!(
            score_probabilities(&image, &[], 1.0),
            Err(ScoringError::EmptyVocabulary)
        );
        assert_eq!(
            score_probabilities(&image, &[unit(&[1.0, 0.0, 0.0])], 1.0),
            Err(ScoringError::Dim { expected: 2, actual: 3 })
        );
        assert!(matches!(
            score_probabilities(&image, &[unit(&[1.0, 0.0])], 0.0),
            Err(ScoringError::LogitScale(_))
        ));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(select_top_k(&dist(&[0.1, 0.7, 0.2]), 1).unwrap(), vec![1]);
        assert_eq!(select_top_k(&dist(&[0.25; 4]), 2).unwrap(), vec![0, 1]);
        assert_eq!(select_top_k(&dist(&[0.25; 4]), 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(
            select_top_k(&dist(&[0.5, 0.5]), 3),
            Err(ScoringError::Range { k: 3, n: 2 })
        );
        assert_eq!(
            select_top_k(&dist(&[0.5, 0.5]), 0),
            Err(ScoringError::Range { k: 0, n: 2 })
        );
    }

    #[test]
    fn threshold_mean_matches_percent_statement() {
        let n = 889;
        let probs = vec![1.0 / n as f64; n];
        let s = threshold_stats(&probs, ProbabilityScale::Fraction, 9.0);
        assert_eq!(s.mean, 1.0 / 889.0);
        assert!((s.mean - 0.0011249).abs() < 1e-7);
        let pct: Vec<f64> = probs.iter().map(|p| p * 100.0).collect();
        assert_eq!(
            threshold_stats(&pct, ProbabilityScale::Percent, 9.0).mean,
            100.0 / 889.0
        );
    }

    #[test]
    fn uniform_distribution_selects_nothing() {
        assert!(select_above_threshold(&dist(&[0.125; 8]), 1.0).unwrap().is_empty());
        assert_eq!(
            select_above_threshold(&dist(&[1.0]), 1.0),
            Err(ScoringError::TooFewEntries(1))
        );
    }

    #[test]
    fn peaked_distribution_against_direct_mean_std() {
        // N = 50: peak 0.97 at index 17, the rest share 0.03 uniformly.
        let n = 50;
        let rest = 0.03 / (n - 1) as f64;
        let mut probs = vec![rest; n];
        probs[17] = 0.97;
        let mean = 1.0 / n as f64;
        let var = ((0.97 - mean).powi(2) + (n - 1) as f64 * (rest - mean).powi(2)) / n as f64;
        let z_peak = (0.97 - mean) / var.sqrt();
        // a lone peak over a flat remainder sits at sqrt(N - 1) = 7 deviations
        assert!((z_peak - 7.0).abs() < 1e-9);
        assert!(select_above_threshold(&dist(&probs), 9.0).unwrap().is_empty());
        assert_eq!(select_above_threshold(&dist(&probs), 5.0).unwrap(), vec![17]);
        assert_eq!(select_above_threshold(&dist(&probs), 6.99).unwrap(), vec![17]);

        // with N = 889 the same shape clears nine deviations
        let n = 889;
        let rest = 0.03 / (n - 1) as f64;
        let mut probs = vec![rest; n];
        probs[300] = 0.97;
        assert_eq!(select_above_threshold(&dist(&probs), 9.0).unwrap(), vec![300]);
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("top:5".parse::<SelectionRule>().unwrap(), SelectionRule::TopK(5));
        assert_eq!(
            "std:9".parse::<SelectionRule>().unwrap(),
            SelectionRule::MeanPlusKStd(9.0)
        );
        assert_eq!(SelectionRule::MeanPlusKStd(2.5).to_string(), "std:2.5");
        for bad in ["top:0", "std:-1", "mean:3", "top", "top:x"] {
            assert!(bad.parse::<SelectionRule>().is_err(), "{bad}");
        }
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(dist(&[0.2, 0.4, 0.4]).argmax(), Some(1));
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(values in prop::collection::vec(0.0f64..1.0, 1..40), k in 1usize..40) {
            prop_assume!(k <= values.len());
            let mut pairs: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = pairs.into_iter().take(k).map(|(_, i)| i).collect();
            prop_assert_eq!(top_k_indices(&values, k).unwrap(), expected);
        }

        #[test]
        fn threshold_sets_are_nested(logits in prop::collection::vec(-5.0f64..5.0, 2..60)) {
            let d = dist(&softmax(&logits));
            let ks = [1.0, 2.0, 5.0, 7.0, 9.0];
            for w in ks.windows(2) {
                let loose = select_above_threshold(&d, w[0]).unwrap();
                let tight = select_above_threshold(&d, w[1]).unwrap();
                prop_assert!(tight.iter().all(|i| loose.contains(i)));
            }
        }
    }
}
