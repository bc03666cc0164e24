//! Deterministic stand-in for a chat/completion endpoint.
//!
//! The mock reads the caption part of the prompt (everything before the
//! fixed " From suffering, ..." body), looks up keywords in a fixed table and
//! answers with a numbered list of the matched labels.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::{json, Value};

use crate::taxonomy::{EmotionLabel, LabelSet};

use super::transport::{prompt_of, Reply, Transport};

use EmotionLabel::*;

/// Keyword → labels. Keywords are matched as whole lowercase words.
pub const MOCK_KEYWORDS: &[(&str, &[EmotionLabel])] = &[
    // actions
    ("dancing", &[Happiness, Excitement, Pleasure]),
    ("laughing", &[Happiness, Pleasure]),
    ("crying", &[Sadness, Suffering]),
    ("hugging", &[Affection, Happiness]),
    ("kissing", &[Affection, Pleasure]),
    ("playing", &[Engagement, Excitement]),
    ("reading", &[Engagement, Peace]),
    ("fighting", &[Anger, Engagement]),
    ("wrestling", &[Anger, Engagement]),
    ("boxing", &[Anger, Confidence]),
    ("arguing", &[Anger, Annoyance, Disapproval]),
    ("protesting", &[Anger, Disapproval]),
    ("praying", &[Anticipation, Peace, Yearning]),
    ("sleeping", &[Fatigue, Peace]),
    ("yawning", &[Fatigue, Disconnection]),
    ("waiting", &[Anticipation, Disconnection]),
    ("celebrating", &[Excitement, Happiness, Esteem]),
    ("cheering", &[Excitement, Happiness]),
    ("studying", &[Engagement, Confidence]),
    ("teaching", &[Engagement, Confidence]),
    ("comforting", &[Sympathy, Affection]),
    ("skydiving", &[Excitement, Fear]),
    ("giving a speech", &[Confidence, Esteem]),
    ("eating", &[Pleasure]),
    // physical signals
    ("grin", &[Happiness]),
    ("belly laugh", &[Happiness, Pleasure]),
    ("clenched jaw", &[Anger, Annoyance]),
    ("angry tears", &[Anger, Suffering]),
    ("bowed head", &[Sadness, Embarrassment]),
    ("hanging head", &[Sadness, Embarrassment]),
    ("pained", &[Pain, Suffering]),
    ("downturned mouth", &[Sadness, Disapproval]),
    ("arms crossing", &[Disapproval, Annoyance]),
    ("confrontational stance", &[Anger, Disapproval]),
    ("relaxed physique", &[Peace]),
    ("yearning look", &[Yearning]),
    ("wrinkled nose", &[Aversion]),
    ("wrinkled brow", &[DoubtConfusion]),
    ("distant or empty stare", &[Disconnection]),
    ("straight posture", &[Confidence]),
    ("high chin", &[Confidence, Esteem]),
    ("thrust-out chest", &[Confidence]),
    ("upturned face", &[Anticipation]),
    ("open mouth", &[Surprise]),
    ("head tilt", &[Engagement, DoubtConfusion]),
    ("flushed", &[Embarrassment]),
    ("hunched posture", &[Fatigue, Sadness]),
    ("runny nose", &[Suffering]),
    ("watery gaze", &[Sensitivity, Sadness]),
    ("pouty bottom lip", &[Sensitivity, Annoyance]),
    ("tension-filled expression", &[Disquietment, Fear]),
    ("visage that glows", &[Happiness, Esteem]),
    // environments
    ("beach", &[Peace]),
    ("hospital", &[Suffering, Disquietment]),
    ("emergency room", &[Fear, Disquietment]),
    ("funeral", &[Sadness, Sympathy]),
    ("cemetery", &[Sadness]),
    ("party", &[Happiness]),
    ("wedding", &[Affection, Happiness]),
    ("classroom", &[Engagement]),
    ("concert", &[Excitement]),
    ("prison", &[Suffering]),
];

/// Text before the fixed prompt body; empty for image-only prompts.
pub fn caption_part(prompt: &str) -> &str {
    if prompt.starts_with("From ") {
        return "";
    }
    match prompt.find(" From suffering") {
        Some(i) => &prompt[..i],
        None => prompt,
    }
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    let mut start = 0;
    while let Some(pos) = haystack[start..].find(needle) {
        let at = start + pos;
        let end = at + needle.len();
        let before_ok = haystack[..at]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = haystack[end..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
        start = at + needle.chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// Labels the mock assigns to a caption.
pub fn mock_labels(caption: &str) -> LabelSet {
    let lowered = caption.to_lowercase();
    let mut labels = LabelSet::empty();
    for (keyword, hits) in MOCK_KEYWORDS {
        if contains_word(&lowered, keyword) {
            for label in *hits {
                labels.insert(*label);
            }
        }
    }
    labels
}

/// The mock's reply text for a label set.
pub fn mock_reply_text(labels: LabelSet) -> String {
    if labels.is_empty() {
        return "I cannot determine how this person feels from the description.".into();
    }
    let mut out = String::from("Based on the description, the most likely labels are:\n");
    for (i, label) in labels.iter().enumerate() {
        let name = label.canonical_name();
        let mut chars = name.chars();
        let capitalized: String = chars
            .next()
            .map(|c| c.to_uppercase().chain(chars).collect())
            .unwrap_or_default();
        out.push_str(&format!("{}. {}\n", i + 1, capitalized));
    }
    out
}

/// Answers chat and completion requests from the keyword table.
#[derive(Debug, Default)]
pub struct MockLlm {
    calls: AtomicUsize,
}

impl MockLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for MockLlm {
    fn send(&self, path: &str, body: &Value) -> Result<Reply, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let Some(prompt) = prompt_of(body) else {
            return Ok(Reply {
                status: 400,
                body: json!({"error": {"message": "no prompt"}}).to_string(),
            });
        };
        let text = mock_reply_text(mock_labels(caption_part(&prompt)));
        let reply = if path.ends_with("/chat/completions") {
            json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]})
        } else {
            json!({"choices": [{"index": 0, "text": text}]})
        };
        Ok(Reply::ok(reply.to_string()))
    }
}
