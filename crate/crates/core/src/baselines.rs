//! Reference predictors: random six (uniform or frequency-weighted), the six
//! most frequent labels, and direct zero-shot scoring of the emotion prompts.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::AnnotationRecord;
use crate::embed::{EmbedError, EmbeddingSource, RegionSpec};
use crate::scoring::{score_probabilities, top_k_indices, ProbabilityDistribution, ScoringError};
use crate::taxonomy::{parse_label, EmotionLabel, LabelSet, Vocabulary, VocabularyCategory, LABEL_COUNT};

/// Average number of labels per person that the random and majority
/// baselines emit.
pub const BASELINE_K: usize = 6;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("label frequency table is empty")]
    DegenerateFrequencies,
    #[error("weighted sampling needs a frequency table")]
    MissingFrequencies,
    #[error("expected the emotions vocabulary, got {0}")]
    WrongVocabulary(VocabularyCategory),
    #[error("emotion vocabulary entry {0:?} is not a taxonomy label")]
    UnknownEmotion(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFrequencyTable {
    pub counts: [u64; LABEL_COUNT],
}

impl LabelFrequencyTable {
    pub fn from_counts(counts: [u64; LABEL_COUNT]) -> Result<Self, BaselineError> {
        if counts.iter().all(|&c| c == 0) {
            return Err(BaselineError::DegenerateFrequencies);
        }
        Ok(LabelFrequencyTable { counts })
    }

    /// Occurrences of each label in the combined ground truth of `records`.
    pub fn from_records(records: &[AnnotationRecord]) -> Result<Self, BaselineError> {
        let mut counts = [0u64; LABEL_COUNT];
        for r in records {
            for label in r.combined().iter() {
                counts[label.index()] += 1;
            }
        }
        Self::from_counts(counts)
    }

    pub fn count(&self, label: EmotionLabel) -> u64 {
        self.counts[label.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-record generator: stream `index` of a ChaCha8 seeded with `seed`.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Six distinct labels drawn without replacement, uniformly or in
/// proportion to `freq`.
pub fn predict_random(
    seed: u64,
    index: u64,
    weighted: bool,
    freq: Option<&LabelFrequencyTable>,
) -> Result<LabelSet, BaselineError> {
    let mut rng = record_rng(seed, index);
    let picked: Vec<EmotionLabel> = if weighted {
        let freq = freq.ok_or(BaselineError::MissingFrequencies)?;
        let positive = freq.counts.iter().filter(|&&c| c > 0).count();
        if positive < BASELINE_K {
            // fill with the zero-weight labels in canonical order
            let mut set: LabelSet = EmotionLabel::ALL
                .into_iter()
                .filter(|l| freq.count(*l) > 0)
                .collect();
            for l in EmotionLabel::ALL {
                if set.len() == BASELINE_K {
                    break;
                }
                set.insert(l);
            }
            return Ok(set);
        }
        EmotionLabel::ALL
            .choose_multiple_weighted(&mut rng, BASELINE_K, |l| freq.count(*l) as f64)
            .expect("weights are finite and non-negative")
            .copied()
            .collect()
    } else {
        EmotionLabel::ALL
            .choose_multiple(&mut rng, BASELINE_K)
            .copied()
            .collect()
    };
    Ok(picked.into_iter().collect())
}

/// The six most frequent labels; ties go to the earlier label in canonical
/// order.
pub fn predict_majority(freq: &LabelFrequencyTable) -> Result<LabelSet, BaselineError> {
    if freq.total() == 0 {
        return Err(BaselineError::DegenerateFrequencies);
    }
    let mut order: Vec<EmotionLabel> = EmotionLabel::ALL.to_vec();
    order.sort_by(|a, b| freq.count(*b).cmp(&freq.count(*a)));
    Ok(order.into_iter().take(BASELINE_K).collect())
}

/// Taxonomy label of every emotion vocabulary entry, in entry order.
pub fn emotion_labels(vocab: &Vocabulary) -> Result<Vec<EmotionLabel>, BaselineError> {
    if vocab.category != VocabularyCategory::Emotions {
        return Err(BaselineError::WrongVocabulary(vocab.category));
    }
    vocab
        .entries
        .iter()
        .map(|e| parse_label(&e.text).map_err(|_| BaselineError::UnknownEmotion(e.text.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipDirectPrediction {
    pub labels: LabelSet,
    /// Probability per label in canonical order.
    pub scores: Vec<f64>,
}

/// Top-`k` emotion prompts for `region`.
pub fn predict_clip_direct(
    source: &dyn EmbeddingSource,
    region: &RegionSpec,
    emotions: &Vocabulary,
    k: usize,
) -> Result<ClipDirectPrediction, BaselineError> {
    let labels = emotion_labels(emotions)?;
    let texts = source.text_embeddings(emotions)?;
    let image = source.image_embedding(region)?;
    let dist = score_probabilities(&image, &texts, source.logit_scale())?;
    Ok(clip_direct_from_distribution(&dist, &labels, k)?)
}

pub(crate) fn clip_direct_from_distribution(
    dist: &ProbabilityDistribution,
    labels: &[EmotionLabel],
    k: usize,
) -> Result<ClipDirectPrediction, ScoringError> {
    let top = top_k_indices(&dist.probs, k)?;
    let mut scores = vec![0.0; LABEL_COUNT];
    for (i, label) in labels.iter().enumerate() {
        scores[label.index()] = dist.probs[i];
    }
    Ok(ClipDirectPrediction {
        labels: top.into_iter().map(|i| labels[i]).collect(),
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BaselineKind {
    Rand6,
    Rand6Weighted,
    Majority,
    ClipDirect,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Rand6,
        BaselineKind::Rand6Weighted,
        BaselineKind::Majority,
        BaselineKind::ClipDirect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Rand6 => "rand6",
            BaselineKind::Rand6Weighted => "rand6-weighted",
            BaselineKind::Majority => "majority",
            BaselineKind::ClipDirect => "clip-direct",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BaselineKind::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| format!("unknown baseline {s:?}; expected one of rand6, rand6-weighted, majority, clip-direct"))
    }
}

impl TryFrom<String> for BaselineKind {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<BaselineKind> for String {
    fn from(kind: BaselineKind) -> Self {
        kind.as_str().to_string()
    }
}
