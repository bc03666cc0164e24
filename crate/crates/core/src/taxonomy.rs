//! The closed 26-label emotion taxonomy, the alias table used when reading
//! free text, and the captioning vocabularies.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("unknown emotion label: {0:?}")]
    UnknownLabel(String),
    #[error("{category} vocabulary: expected {expected} entries, got {actual}")]
    Cardinality {
        category: VocabularyCategory,
        expected: usize,
        actual: usize,
    },
    #[error("{source_name}:{line}: {message}")]
    Format {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One of the 26 emotion categories, in canonical prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmotionLabel {
    Suffering,
    Pain,
    Aversion,
    Disapproval,
    Anger,
    Fear,
    Annoyance,
    Fatigue,
    Disquietment,
    DoubtConfusion,
    Embarrassment,
    Disconnection,
    Affection,
    Confidence,
    Engagement,
    Happiness,
    Peace,
    Pleasure,
    Esteem,
    Excitement,
    Anticipation,
    Yearning,
    Sensitivity,
    Surprise,
    Sadness,
    Sympathy,
}

pub const LABEL_COUNT: usize = 26;

struct LabelInfo {
    name: &'static str,
    definition: &'static str,
    // Exact wording inside the parentheses of the definitional prompt,
    // ahead of the definition. Two labels carry irregular wording there.
    gloss_lead: &'static str,
    // Text between the closing parenthesis and the list separator.
    gloss_tail: &'static str,
}

const fn info(name: &'static str, definition: &'static str) -> LabelInfo {
    LabelInfo {
        name,
        definition,
        gloss_lead: "which means",
        gloss_tail: "",
    }
}

const LABEL_INFO: [LabelInfo; LABEL_COUNT] = [
    info("suffering", "psychological or emotional suffering; distressed; anguished"),
    LabelInfo {
        gloss_tail: " ",
        ..info("pain", "physical pain")
    },
    info("aversion", "feeling disgust, dislike, repulsion; feeling hate"),
    info(
        "disapproval",
        "feeling that something is wrong or reprehensible; contempt; hostile",
    ),
    LabelInfo {
        gloss_lead: "which mean",
        ..info("anger", "intense displeasure or rage; furious; resentful")
    },
    info(
        "fear",
        "feeling suspicious or afraid of danger, threat, evil or pain; horror",
    ),
    info(
        "annoyance",
        "bothered by something or someone; irritated; impatient; frustrated",
    ),
    info("fatigue", "weariness; tiredness; sleepy"),
    info(
        "disquietment",
        "nervous; worried; upset; anxious; tense; pressured; alarmed",
    ),
    info(
        "doubt/confusion",
        "difficulty to understand or decide; thinking about different options",
    ),
    info("embarrassment", "feeling ashamed or guilty"),
    info(
        "disconnection",
        "feeling not interested in the main event of the surrounding; indifferent; bored; distracted",
    ),
    info("affection", "fond feelings; love; tenderness"),
    info(
        "confidence",
        "feeling of being certain; conviction that an outcome will be favorable; encouraged; proud",
    ),
    info(
        "engagement",
        "paying attention to something; absorbed into something; curious; interested",
    ),
    info("happiness", "feeling delighted; feeling enjoyment or amusement"),
    info(
        "peace",
        "well being and relaxed; no worry; having positive thoughts or sensations; satisfied",
    ),
    info("pleasure", "feeling of delight in the senses"),
    info(
        "esteem",
        "feelings of favorable opinion or judgment; respect; admiration; gratefulness",
    ),
    info("excitement", "feeling enthusiasm; stimulated; energetic"),
    info(
        "anticipation",
        "state of looking forward; hoping on or getting prepared for possible future events",
    ),
    info("yearning", "strong desire to have something; jealous; envious; lust"),
    LabelInfo {
        gloss_lead: "whcih means",
        ..info(
            "sensitivity",
            "feeling of being physically or emotionally wounded; feeling delicate or vulnerable",
        )
    },
    info("surprise", "sudden discovery of something unexpected"),
    info(
        "sadness",
        "feeling unhappy, sorrow, disappointed, or discouraged",
    ),
    info(
        "sympathy",
        "state of sharing others\u{2019} emotions, goals or troubles; supportive; compassionate",
    ),
];

impl EmotionLabel {
    pub const ALL: [EmotionLabel; LABEL_COUNT] = [
        EmotionLabel::Suffering,
        EmotionLabel::Pain,
        EmotionLabel::Aversion,
        EmotionLabel::Disapproval,
        EmotionLabel::Anger,
        EmotionLabel::Fear,
        EmotionLabel::Annoyance,
        EmotionLabel::Fatigue,
        EmotionLabel::Disquietment,
        EmotionLabel::DoubtConfusion,
        EmotionLabel::Embarrassment,
        EmotionLabel::Disconnection,
        EmotionLabel::Affection,
        EmotionLabel::Confidence,
        EmotionLabel::Engagement,
        EmotionLabel::Happiness,
        EmotionLabel::Peace,
        EmotionLabel::Pleasure,
        EmotionLabel::Esteem,
        EmotionLabel::Excitement,
        EmotionLabel::Anticipation,
        EmotionLabel::Yearning,
        EmotionLabel::Sensitivity,
        EmotionLabel::Surprise,
        EmotionLabel::Sadness,
        EmotionLabel::Sympathy,
    ];

    /// Position in canonical order (0..26).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn canonical_name(self) -> &'static str {
        LABEL_INFO[self.index()].name
    }

    pub fn definition(self) -> &'static str {
        LABEL_INFO[self.index()].definition
    }

    /// `name(which means definition)` exactly as it appears in the
    /// definitional prompt, including any trailing spacing quirk.
    pub fn glossed(self) -> String {
        let info = &LABEL_INFO[self.index()];
        format!(
            "{}({} {}){}",
            info.name, info.gloss_lead, info.definition, info.gloss_tail
        )
    }
}

pub fn definition_of(label: EmotionLabel) -> &'static str {
    label.definition()
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for EmotionLabel {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_label(s)
    }
}

impl Serialize for EmotionLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.canonical_name())
    }
}

impl<'de> Deserialize<'de> for EmotionLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_label(&s).map_err(serde::de::Error::custom)
    }
}

/// A subset of the taxonomy. Iteration is always in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelSet(u32);

impl LabelSet {
    pub const fn empty() -> Self {
        LabelSet(0)
    }

    pub fn full() -> Self {
        LabelSet((1u32 << LABEL_COUNT) - 1)
    }

    pub fn from_bits(bits: u32) -> Self {
        LabelSet(bits & Self::full().0)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn insert(&mut self, label: EmotionLabel) -> bool {
        let had = self.contains(label);
        self.0 |= 1 << label.index();
        !had
    }

    pub fn remove(&mut self, label: EmotionLabel) {
        self.0 &= !(1 << label.index());
    }

    pub fn contains(self, label: EmotionLabel) -> bool {
        self.0 & (1 << label.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 | other.0)
    }

    pub fn intersection(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & other.0)
    }

    pub fn symmetric_difference(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 ^ other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = EmotionLabel> {
        EmotionLabel::ALL
            .into_iter()
            .filter(move |label| self.contains(*label))
    }

    pub fn names(self) -> Vec<&'static str> {
        self.iter().map(EmotionLabel::canonical_name).collect()
    }
}

impl FromIterator<EmotionLabel> for LabelSet {
    fn from_iter<I: IntoIterator<Item = EmotionLabel>>(iter: I) -> Self {
        let mut set = LabelSet::empty();
        for label in iter {
            set.insert(label);
        }
        set
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.names().join(", "))
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let labels = Vec::<EmotionLabel>::deserialize(deserializer)?;
        Ok(labels.into_iter().collect())
    }
}

const DEFAULT_ALIASES: &str = include_str!("../data/aliases.tsv");

/// Explicit alias → canonical mapping used by `parse_label` and the
/// response scanner.
#[derive(Debug, Clone)]
pub struct AliasTable {
    entries: Vec<(String, EmotionLabel)>,
}

impl AliasTable {
    pub fn parse(text: &str, source_name: &str) -> Result<Self, TaxonomyError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let format_err = |message: String| TaxonomyError::Format {
                source_name: source_name.to_string(),
                line: i + 1,
                message,
            };
            let (alias, canonical) = line
                .split_once('\t')
                .ok_or_else(|| format_err("expected two tab-separated columns".into()))?;
            let label = canonical_lookup(&normalize(canonical))
                .ok_or_else(|| format_err(format!("unknown canonical label {canonical:?}")))?;
            let alias = normalize(alias);
            if alias.is_empty() {
                return Err(format_err("empty alias".into()));
            }
            entries.push((alias, label));
        }
        Ok(AliasTable { entries })
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn lookup(&self, normalized: &str) -> Option<EmotionLabel> {
        self.entries
            .iter()
            .find(|(alias, _)| alias == normalized)
            .map(|(_, label)| *label)
    }

    pub fn entries(&self) -> &[(String, EmotionLabel)] {
        &self.entries
    }
}

impl Default for AliasTable {
    fn default() -> Self {
        AliasTable::parse(DEFAULT_ALIASES, "aliases.tsv").expect("bundled alias table is valid")
    }
}

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn canonical_lookup(normalized: &str) -> Option<EmotionLabel> {
    EmotionLabel::ALL
        .into_iter()
        .find(|label| label.canonical_name() == normalized)
}

/// Singular forms to try for a possibly-plural word.
pub(crate) fn singular_candidates(word: &str) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(stem) = word.strip_suffix("ies") {
        out.push(format!("{stem}y"));
    }
    if let Some(stem) = word.strip_suffix("es") {
        out.push(stem.to_string());
    }
    if let Some(stem) = word.strip_suffix('s') {
        out.push(stem.to_string());
    }
    out
}

/// Parses a single label name using the bundled alias table.
pub fn parse_label(text: &str) -> Result<EmotionLabel, TaxonomyError> {
    parse_label_with(text, &AliasTable::default())
}

pub fn parse_label_with(text: &str, aliases: &AliasTable) -> Result<EmotionLabel, TaxonomyError> {
    let key = normalize(text);
    let resolve = |k: &str| canonical_lookup(k).or_else(|| aliases.lookup(k));
    if let Some(label) = resolve(&key) {
        return Ok(label);
    }
    singular_candidates(&key)
        .iter()
        .find_map(|k| resolve(k))
        .ok_or_else(|| TaxonomyError::UnknownLabel(text.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabularyCategory {
    GenderAge,
    Actions,
    Signals,
    Environments,
    Emotions,
}

impl VocabularyCategory {
    pub const ALL: [VocabularyCategory; 5] = [
        VocabularyCategory::GenderAge,
        VocabularyCategory::Actions,
        VocabularyCategory::Signals,
        VocabularyCategory::Environments,
        VocabularyCategory::Emotions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VocabularyCategory::GenderAge => "gender_age",
            VocabularyCategory::Actions => "actions",
            VocabularyCategory::Signals => "signals",
            VocabularyCategory::Environments => "environments",
            VocabularyCategory::Emotions => "emotions",
        }
    }

    pub fn required_len(self) -> usize {
        match self {
            VocabularyCategory::GenderAge => 8,
            VocabularyCategory::Actions => 848,
            VocabularyCategory::Signals => 889,
            VocabularyCategory::Environments => 224,
            VocabularyCategory::Emotions => LABEL_COUNT,
        }
    }

    /// CLIP prompt template; `{}` is the entry, `a(n)` is resolved per entry.
    pub fn prompt_template(self) -> &'static str {
        match self {
            VocabularyCategory::GenderAge | VocabularyCategory::Environments => {
                "A photo of a(n) {}"
            }
            VocabularyCategory::Actions => "A photo of a person who is {}",
            VocabularyCategory::Signals => "A photo of a person who {}",
            VocabularyCategory::Emotions => "The person in the red bounding box is feeling {}",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }
}

impl fmt::Display for VocabularyCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VocabularyCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VocabularyCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown vocabulary category {s:?}"))
    }
}

/// "a" or "an" by the initial letter of `word`.
pub fn indefinite_article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardinalityPolicy {
    #[default]
    Strict,
    Warn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub category: VocabularyCategory,
    pub entries: Vec<VocabEntry>,
}

impl Vocabulary {
    pub fn parse(
        category: VocabularyCategory,
        text: &str,
        source_name: &str,
        policy: CardinalityPolicy,
    ) -> Result<Self, TaxonomyError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let mut seen = HashMap::new();
        let mut entries = Vec::new();
        if !body.is_empty() {
            for (index, line) in body.split('\n').enumerate() {
                let format_err = |message: String| TaxonomyError::Format {
                    source_name: source_name.to_string(),
                    line: index + 1,
                    message,
                };
                if line.ends_with('\r') {
                    return Err(format_err("CRLF line ending".into()));
                }
                if line.trim().is_empty() {
                    return Err(format_err("empty line".into()));
                }
                if let Some(first) = seen.insert(line.to_string(), index + 1) {
                    return Err(format_err(format!("duplicate of line {first}: {line:?}")));
                }
                entries.push(VocabEntry {
                    index,
                    text: line.to_string(),
                });
            }
        }
        let expected = category.required_len();
        if entries.len() != expected {
            match policy {
                CardinalityPolicy::Strict => {
                    return Err(TaxonomyError::Cardinality {
                        category,
                        expected,
                        actual: entries.len(),
                    })
                }
                CardinalityPolicy::Warn => log::warn!(
                    "{category} vocabulary from {source_name}: expected {expected} entries, got {}",
                    entries.len()
                ),
            }
        }
        if entries.is_empty() {
            return Err(TaxonomyError::Format {
                source_name: source_name.to_string(),
                line: 1,
                message: "vocabulary is empty".into(),
            });
        }
        Ok(Vocabulary { category, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, index: usize) -> Option<&VocabEntry> {
        self.entries.get(index)
    }

    /// Text sent to the text encoder for entry `index`.
    pub fn prompt(&self, index: usize) -> String {
        render_prompt(self.category, &self.entries[index].text)
    }

    pub fn prompts(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.prompt(i)).collect()
    }

    /// Canonical file bytes: one entry per line, LF, final newline.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for entry in &self.entries {
            s.push_str(&entry.text);
            s.push('\n');
        }
        s
    }
}

pub fn render_prompt(category: VocabularyCategory, entry: &str) -> String {
    let template = category.prompt_template();
    match category {
        VocabularyCategory::Signals => template.replace("{}", &lowercase_first(entry)),
        _ => template
            .replace("a(n)", indefinite_article(entry))
            .replace("{}", entry),
    }
}

pub(crate) fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub(crate) fn uppercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn load_vocabulary(
    category: VocabularyCategory,
    source: &Path,
    policy: CardinalityPolicy,
) -> Result<Vocabulary, TaxonomyError> {
    let text = std::fs::read_to_string(source).map_err(|e| TaxonomyError::Io {
        path: source.display().to_string(),
        source: e,
    })?;
    Vocabulary::parse(category, &text, &source.display().to_string(), policy)
}

const BUNDLED_VOCAB: [(VocabularyCategory, &str); 5] = [
    (
        VocabularyCategory::GenderAge,
        include_str!("../data/vocab/gender_age.txt"),
    ),
    (
        VocabularyCategory::Actions,
        include_str!("../data/vocab/actions.txt"),
    ),
    (
        VocabularyCategory::Signals,
        include_str!("../data/vocab/signals.txt"),
    ),
    (
        VocabularyCategory::Environments,
        include_str!("../data/vocab/environments.txt"),
    ),
    (
        VocabularyCategory::Emotions,
        include_str!("../data/vocab/emotions.txt"),
    ),
];

/// All five vocabularies.
#[derive(Debug, Clone)]
pub struct VocabularySet {
    pub gender_age: Vocabulary,
    pub actions: Vocabulary,
    pub signals: Vocabulary,
    pub environments: Vocabulary,
    pub emotions: Vocabulary,
}

impl VocabularySet {
    /// The vocabularies compiled into the crate.
    pub fn bundled() -> Self {
        let load = |category: VocabularyCategory| {
            let (_, text) = BUNDLED_VOCAB
                .iter()
                .find(|(c, _)| *c == category)
                .expect("every category is bundled");
            Vocabulary::parse(category, text, &category.file_name(), CardinalityPolicy::Strict)
                .expect("bundled vocabulary is valid")
        };
        Self::from_fn(load)
    }

    /// Loads `<dir>/<category>.txt` for every category.
    pub fn load_dir(dir: &Path, policy: CardinalityPolicy) -> Result<Self, TaxonomyError> {
        let mut loaded = Vec::with_capacity(5);
        for category in VocabularyCategory::ALL {
            loaded.push(load_vocabulary(
                category,
                &dir.join(category.file_name()),
                policy,
            )?);
        }
        let mut it = loaded.into_iter();
        Ok(VocabularySet {
            gender_age: it.next().unwrap(),
            actions: it.next().unwrap(),
            signals: it.next().unwrap(),
            environments: it.next().unwrap(),
            emotions: it.next().unwrap(),
        })
    }

    fn from_fn(mut f: impl FnMut(VocabularyCategory) -> Vocabulary) -> Self {
        VocabularySet {
            gender_age: f(VocabularyCategory::GenderAge),
            actions: f(VocabularyCategory::Actions),
            signals: f(VocabularyCategory::Signals),
            environments: f(VocabularyCategory::Environments),
            emotions: f(VocabularyCategory::Emotions),
        }
    }

    pub fn get(&self, category: VocabularyCategory) -> &Vocabulary {
        match category {
            VocabularyCategory::GenderAge => &self.gender_age,
            VocabularyCategory::Actions => &self.actions,
            VocabularyCategory::Signals => &self.signals,
            VocabularyCategory::Environments => &self.environments,
            VocabularyCategory::Emotions => &self.emotions,
        }
    }

    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for category in VocabularyCategory::ALL {
            std::fs::write(
                dir.join(category.file_name()),
                self.get(category).to_file_string(),
            )?;
        }
        Ok(())
    }
}
