//! Free-text LLM reply → label set.
//!
//! Scans the lowercased reply left to right. At every word start the longest
//! known term (canonical name, alias, or plural form) that also ends on a
//! word boundary wins.

use serde::{Deserialize, Serialize};

use crate::taxonomy::{normalize, AliasTable, EmotionLabel, LabelSet};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedLabels {
    pub labels: LabelSet,
    /// Labels in order of first mention.
    pub mentions: Vec<EmotionLabel>,
    /// Text between matches that still contains letters.
    pub unmatched_fragments: Vec<String>,
    pub empty_response: bool,
}

#[derive(Debug, Clone)]
pub struct LabelScanner {
    /// Longest first.
    terms: Vec<(String, EmotionLabel)>,
}

impl LabelScanner {
    pub fn new(aliases: &AliasTable) -> Self {
        let mut terms: Vec<(String, EmotionLabel)> = Vec::new();
        for label in EmotionLabel::ALL {
            let name = label.canonical_name();
            terms.push((name.to_string(), label));
            terms.push((format!("{name}s"), label));
        }
        for (alias, label) in aliases.entries() {
            terms.push((alias.clone(), *label));
            terms.push((format!("{alias}s"), *label));
        }
        terms.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        terms.dedup_by(|a, b| a.0 == b.0);
        LabelScanner { terms }
    }

    pub fn parse(&self, response: &str) -> ParsedLabels {
        let text = normalize(response);
        let mut out = ParsedLabels::default();
        let mut fragment_start = 0;
        let mut pos = 0;
        while pos < text.len() {
            let at_word_start = text[..pos]
                .chars()
                .next_back()
                .is_none_or(|c| !c.is_alphanumeric());
            let hit = if at_word_start {
                self.match_at(&text, pos)
            } else {
                None
            };
            match hit {
                Some((len, label)) => {
                    push_fragment(&mut out.unmatched_fragments, &text[fragment_start..pos]);
                    if out.labels.insert(label) {
                        out.mentions.push(label);
                    }
                    pos += len;
                    fragment_start = pos;
                }
                None => {
                    pos += text[pos..].chars().next().map_or(1, char::len_utf8);
                }
            }
        }
        push_fragment(&mut out.unmatched_fragments, &text[fragment_start..]);
        out.empty_response = out.labels.is_empty();
        out
    }

    fn match_at(&self, text: &str, pos: usize) -> Option<(usize, EmotionLabel)> {
        let rest = &text[pos..];
        self.terms.iter().find_map(|(term, label)| {
            let tail = rest.strip_prefix(term.as_str())?;
            let boundary = tail.chars().next().is_none_or(|c| !c.is_alphanumeric());
            boundary.then_some((term.len(), *label))
        })
    }
}

impl Default for LabelScanner {
    fn default() -> Self {
        LabelScanner::new(&AliasTable::default())
    }
}

fn push_fragment(fragments: &mut Vec<String>, raw: &str) {
    let trimmed = raw.trim_matches(|c: char| !c.is_alphabetic());
    if !trimmed.is_empty() && trimmed != "and" && trimmed != "or" {
        fragments.push(trimmed.to_string());
    }
}

/// Parses with the bundled alias table.
pub fn parse_labels(response: &str) -> ParsedLabels {
    LabelScanner::default().parse(response)
}
