//! Narrative captions: who (crop), what (full image), where (full image) and
//! how (crop, selected physical signals), with ablation masks.
//!
//! Surface form:
//!
//! ```text
//! A {who} in a {environment}. {Pronoun} is {action}. {Pronoun} {signal}.[ {Pronoun} {signal}.]
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedding, EmbeddingSource, RegionSpec};
use crate::scoring::{score_probabilities, ProbabilityDistribution, ScoringError, SelectionRule};
use crate::taxonomy::{
    indefinite_article, lowercase_first, uppercase_first, VocabEntry, Vocabulary,
    VocabularyCategory, VocabularySet,
};

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("caption config: {0}")]
    Config(String),
}

/// Which caption components to include.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AblationMask {
    pub age: bool,
    pub gender: bool,
    pub environment: bool,
    pub action: bool,
    pub signals: bool,
}

impl AblationMask {
    pub const FULL: AblationMask = AblationMask {
        age: true,
        gender: true,
        environment: true,
        action: true,
        signals: true,
    };

    pub fn without(component: &str) -> Option<Self> {
        let mut mask = Self::FULL;
        match component {
            "age" => mask.age = false,
            "gender" => mask.gender = false,
            "environment" => mask.environment = false,
            "action" => mask.action = false,
            "signals" => mask.signals = false,
            _ => return None,
        }
        Some(mask)
    }

    /// Full caption followed by one row per removed component.
    pub fn ablation_matrix() -> Vec<AblationMask> {
        let mut rows = vec![Self::FULL];
        for c in ["age", "gender", "environment", "action", "signals"] {
            rows.push(Self::without(c).unwrap());
        }
        rows
    }

    pub fn includes_who(&self) -> bool {
        self.age || self.gender
    }

    /// Who-phrase vocabulary implied by the age/gender flags.
    pub fn gender_mode(&self) -> GenderMode {
        match (self.age, self.gender) {
            (false, true) => GenderMode::GenderOnly,
            (true, false) => GenderMode::AgeOnly,
            _ => GenderMode::Full,
        }
    }

    fn included(&self) -> Vec<&'static str> {
        [
            (self.age, "age"),
            (self.gender, "gender"),
            (self.environment, "environment"),
            (self.action, "action"),
            (self.signals, "signals"),
        ]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| name)
        .collect()
    }
}

impl Default for AblationMask {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for AblationMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::FULL {
            return f.write_str("full");
        }
        for c in ["age", "gender", "environment", "action", "signals"] {
            if Self::without(c) == Some(*self) {
                return write!(f, "no-{c}");
            }
        }
        let included = self.included();
        if included.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&included.join(","))
        }
    }
}

impl FromStr for AblationMask {
    type Err = String;

    /// `full`, `none`, `no-<component>`, or a comma list of included components.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "full" => return Ok(Self::FULL),
            "none" => {
                return Ok(AblationMask {
                    age: false,
                    gender: false,
                    environment: false,
                    action: false,
                    signals: false,
                })
            }
            _ => {}
        }
        if let Some(c) = s.strip_prefix("no-") {
            return Self::without(c).ok_or_else(|| format!("unknown caption component {c:?}"));
        }
        let mut mask: AblationMask = "none".parse()?;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "age" => mask.age = true,
                "gender" => mask.gender = true,
                "environment" => mask.environment = true,
                "action" => mask.action = true,
                "signals" => mask.signals = true,
                other => return Err(format!("unknown caption component {other:?}")),
            }
        }
        Ok(mask)
    }
}

impl TryFrom<String> for AblationMask {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<AblationMask> for String {
    fn from(mask: AblationMask) -> Self {
        mask.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenderMode {
    #[default]
    Full,
    GenderOnly,
    AgeOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionComponents {
    pub who: Option<VocabEntry>,
    pub action: Option<VocabEntry>,
    pub environment: Option<VocabEntry>,
    /// Sorted by vocabulary index.
    pub signals: Vec<VocabEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativeCaption {
    pub text: String,
    pub components: CaptionComponents,
    pub mask: AblationMask,
    pub gender_mode: GenderMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Gender {
    Female,
    Male,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AgeGroup {
    Baby,
    Kid,
    Adult,
    Elderly,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn gender_of(who: &str) -> Option<Gender> {
    let ws = words(who);
    let has = |options: &[&str]| ws.iter().any(|w| options.contains(&w.as_str()));
    if has(&["girl", "woman", "female", "lady"]) {
        Some(Gender::Female)
    } else if has(&["boy", "man", "male", "gentleman"]) {
        Some(Gender::Male)
    } else {
        None
    }
}

fn age_of(who: &str) -> AgeGroup {
    let ws = words(who);
    let has = |options: &[&str]| ws.iter().any(|w| options.contains(&w.as_str()));
    if has(&["baby", "infant", "toddler"]) {
        AgeGroup::Baby
    } else if has(&["elderly", "old", "senior"]) {
        AgeGroup::Elderly
    } else if has(&["girl", "boy", "kid", "child"]) {
        AgeGroup::Kid
    } else {
        AgeGroup::Adult
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pronoun {
    She,
    He,
    They,
}

impl Pronoun {
    fn word(self) -> &'static str {
        match self {
            Pronoun::She => "She",
            Pronoun::He => "He",
            Pronoun::They => "They",
        }
    }

    fn be(self) -> &'static str {
        match self {
            Pronoun::They => "are",
            _ => "is",
        }
    }

    /// Lowercased signal phrase with verb agreement for "they".
    fn signal_phrase(self, signal: &str) -> String {
        let lowered = lowercase_first(signal);
        if self == Pronoun::They {
            if let Some(rest) = lowered.strip_prefix("has ") {
                return format!("have {rest}");
            }
        }
        lowered
    }
}

fn with_article(noun: &str) -> String {
    format!("{} {}", indefinite_article(noun), noun)
}

/// The who phrase (with article) and the pronoun used afterwards.
fn who_phrase(
    who: Option<&VocabEntry>,
    mask: &AblationMask,
    mode: GenderMode,
) -> Result<(String, Pronoun), CaptionError> {
    if !mask.includes_who() {
        if mode != GenderMode::Full {
            return Err(CaptionError::Config(format!(
                "who is masked out but gender mode is {mode:?}"
            )));
        }
        return Ok(("a person".into(), Pronoun::They));
    }
    let who = who.ok_or_else(|| CaptionError::Config("who component is missing".into()))?;
    let gender = gender_of(&who.text);
    let pronoun = match gender {
        Some(Gender::Female) => Pronoun::She,
        Some(Gender::Male) => Pronoun::He,
        None => Pronoun::They,
    };
    match mode {
        GenderMode::Full => Ok((with_article(&who.text), pronoun)),
        GenderMode::GenderOnly => match gender {
            Some(Gender::Female) => Ok(("a female".into(), Pronoun::She)),
            Some(Gender::Male) => Ok(("a male".into(), Pronoun::He)),
            None => Err(CaptionError::Config(format!(
                "cannot map {:?} to a gender",
                who.text
            ))),
        },
        GenderMode::AgeOnly => {
            let phrase = match age_of(&who.text) {
                AgeGroup::Baby => "a baby",
                AgeGroup::Kid => "a kid",
                AgeGroup::Adult => "an adult",
                AgeGroup::Elderly => "an elderly person",
            };
            Ok((phrase.into(), Pronoun::They))
        }
    }
}

pub fn assemble_caption(
    components: &CaptionComponents,
    mask: AblationMask,
    gender_mode: GenderMode,
) -> Result<NarrativeCaption, CaptionError> {
    let (who, pronoun) = who_phrase(components.who.as_ref(), &mask, gender_mode)?;
    let mut first = uppercase_first(&who);
    if mask.environment {
        let env = components
            .environment
            .as_ref()
            .ok_or_else(|| CaptionError::Config("environment component is missing".into()))?;
        first.push_str(" in ");
        first.push_str(&with_article(&env.text));
    }
    first.push('.');
    let mut sentences = vec![first];
    if mask.action {
        let action = components
            .action
            .as_ref()
            .ok_or_else(|| CaptionError::Config("action component is missing".into()))?;
        sentences.push(format!("{} {} {}.", pronoun.word(), pronoun.be(), action.text));
    }
    if mask.signals {
        for signal in &components.signals {
            sentences.push(format!(
                "{} {}.",
                pronoun.word(),
                pronoun.signal_phrase(&signal.text)
            ));
        }
    }
    Ok(NarrativeCaption {
        text: sentences.join(" "),
        components: components.clone(),
        mask,
        gender_mode,
    })
}

fn argmax_entry(
    image: &Embedding,
    texts: &[Embedding],
    logit_scale: f64,
    vocab: &Vocabulary,
) -> Result<VocabEntry, CaptionError> {
    let dist = score_probabilities(image, texts, logit_scale)?;
    let best = dist.argmax().ok_or(ScoringError::EmptyVocabulary)?;
    Ok(vocab.entries[best].clone())
}

/// The vocabulary entry most similar to `region`.
pub fn classify_argmax(
    source: &dyn EmbeddingSource,
    region: &RegionSpec,
    vocab: &Vocabulary,
) -> Result<VocabEntry, CaptionError> {
    let image = source.image_embedding(region)?;
    let texts = source.text_embeddings(vocab)?;
    argmax_entry(&image, &texts, source.logit_scale(), vocab)
}

fn select_entries(
    image: &Embedding,
    texts: &[Embedding],
    logit_scale: f64,
    vocab: &Vocabulary,
    rule: SelectionRule,
) -> Result<Vec<VocabEntry>, CaptionError> {
    let mut dist = score_probabilities(image, texts, logit_scale)?;
    dist.category = Some(vocab.category);
    Ok(rule
        .apply(&dist)?
        .into_iter()
        .map(|i| vocab.entries[i].clone())
        .collect())
}

/// Physical signals selected for a crop, ascending by vocabulary index.
pub fn infer_signals(
    source: &dyn EmbeddingSource,
    crop: &RegionSpec,
    rule: SelectionRule,
    signals: &Vocabulary,
) -> Result<Vec<VocabEntry>, CaptionError> {
    let image = source.image_embedding(crop)?;
    let texts = source.text_embeddings(signals)?;
    select_entries(&image, &texts, source.logit_scale(), signals, rule)
}

/// Scores regions against pre-fetched text embeddings for all captioning
/// vocabularies.
pub struct Narrator<'a> {
    source: &'a dyn EmbeddingSource,
    vocabs: &'a VocabularySet,
    rule: SelectionRule,
    gender_age: Vec<Embedding>,
    actions: Vec<Embedding>,
    environments: Vec<Embedding>,
    signals: Vec<Embedding>,
}

impl<'a> Narrator<'a> {
    pub fn new(
        source: &'a dyn EmbeddingSource,
        vocabs: &'a VocabularySet,
        rule: SelectionRule,
    ) -> Result<Self, CaptionError> {
        Ok(Narrator {
            source,
            vocabs,
            rule,
            gender_age: source.text_embeddings(&vocabs.gender_age)?,
            actions: source.text_embeddings(&vocabs.actions)?,
            environments: source.text_embeddings(&vocabs.environments)?,
            signals: source.text_embeddings(&vocabs.signals)?,
        })
    }

    fn bank(&self, category: VocabularyCategory) -> &[Embedding] {
        match category {
            VocabularyCategory::GenderAge => &self.gender_age,
            VocabularyCategory::Actions => &self.actions,
            VocabularyCategory::Environments => &self.environments,
            VocabularyCategory::Signals => &self.signals,
            VocabularyCategory::Emotions => &[],
        }
    }

    pub fn distribution(
        &self,
        image: &Embedding,
        category: VocabularyCategory,
    ) -> Result<ProbabilityDistribution, CaptionError> {
        let mut dist = score_probabilities(image, self.bank(category), self.source.logit_scale())?;
        dist.category = Some(category);
        Ok(dist)
    }

    /// Who and signals from the crop, action and environment from the full image.
    pub fn describe(&self, crop: &RegionSpec, full: &RegionSpec) -> Result<CaptionComponents, CaptionError> {
        let crop_emb = self.source.image_embedding(crop)?;
        let full_emb = self.source.image_embedding(full)?;
        let scale = self.source.logit_scale();
        Ok(CaptionComponents {
            who: Some(argmax_entry(&crop_emb, &self.gender_age, scale, &self.vocabs.gender_age)?),
            action: Some(argmax_entry(&full_emb, &self.actions, scale, &self.vocabs.actions)?),
            environment: Some(argmax_entry(
                &full_emb,
                &self.environments,
                scale,
                &self.vocabs.environments,
            )?),
            signals: select_entries(&crop_emb, &self.signals, scale, &self.vocabs.signals, self.rule)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{mock_embedding, text_key, BBox, EmbeddingStore};
    use crate::taxonomy::CardinalityPolicy;

    fn entry(index: usize, text: &str) -> VocabEntry {
        VocabEntry {
            index,
            text: text.into(),
        }
    }

    fn woman_components() -> CaptionComponents {
        CaptionComponents {
            who: Some(entry(5, "woman")),
            action: Some(entry(3, "dancing")),
            environment: Some(entry(17, "beach")),
            signals: vec![entry(49, "Has a wide grin")],
        }
    }

    #[test]
    fn full_caption_template() {
        let c = assemble_caption(&woman_components(), AblationMask::FULL, GenderMode::Full).unwrap();
        assert_eq!(c.text, "A woman in a beach. She is dancing. She has a wide grin.");
    }

    #[test]
    fn masked_components_leave_no_trace() {
        let no_signals = AblationMask::without("signals").unwrap();
        let c = assemble_caption(&woman_components(), no_signals, GenderMode::Full).unwrap();
        assert_eq!(c.text, "A woman in a beach. She is dancing.");

        let no_env = AblationMask::without("environment").unwrap();
        let c = assemble_caption(&woman_components(), no_env, GenderMode::Full).unwrap();
        assert_eq!(c.text, "A woman. She is dancing. She has a wide grin.");

        let no_action = AblationMask::without("action").unwrap();
        let c = assemble_caption(&woman_components(), no_action, GenderMode::Full).unwrap();
        assert_eq!(c.text, "A woman in a beach. She has a wide grin.");

        let who_only: AblationMask = "age,gender".parse().unwrap();
        let c = assemble_caption(&woman_components(), who_only, GenderMode::Full).unwrap();
        assert_eq!(c.text, "A woman.");
    }

    #[test]
    fn gender_and_age_modes() {
        let mut comps = woman_components();
        comps.who = Some(entry(7, "elderly woman"));
        let mask = AblationMask::without("age").unwrap();
        assert_eq!(mask.gender_mode(), GenderMode::GenderOnly);
        let c = assemble_caption(&comps, mask, mask.gender_mode()).unwrap();
        assert!(c.text.starts_with("A female in a beach. She is dancing."));

        let mask = AblationMask::without("gender").unwrap();
        let c = assemble_caption(&comps, mask, mask.gender_mode()).unwrap();
        assert_eq!(
            c.text,
            "An elderly person in a beach. They are dancing. They have a wide grin."
        );

        let expected_age = [
            ("baby girl", "a baby"),
            ("baby boy", "a baby"),
            ("girl", "a kid"),
            ("boy", "a kid"),
            ("man", "an adult"),
            ("woman", "an adult"),
            ("elderly man", "an elderly person"),
            ("elderly woman", "an elderly person"),
        ];
        for (who, phrase) in expected_age {
            let (p, _) = who_phrase(Some(&entry(0, who)), &AblationMask::FULL, GenderMode::AgeOnly).unwrap();
            assert_eq!(p, phrase, "{who}");
            let (g, _) =
                who_phrase(Some(&entry(0, who)), &AblationMask::FULL, GenderMode::GenderOnly).unwrap();
            let female = who.contains("girl") || who.contains("woman");
            assert_eq!(g, if female { "a female" } else { "a male" }, "{who}");
        }
    }

    #[test]
    fn masked_who_requires_full_mode() {
        let mut mask = AblationMask::FULL;
        mask.age = false;
        mask.gender = false;
        assert!(matches!(
            assemble_caption(&woman_components(), mask, GenderMode::GenderOnly),
            Err(CaptionError::Config(_))
        ));
        let c = assemble_caption(&woman_components(), mask, GenderMode::Full).unwrap();
        assert_eq!(c.text, "A person in a beach. They are dancing. They have a wide grin.");
    }

    #[test]
    fn article_follows_initial_vowel() {
        let mut comps = woman_components();
        comps.environment = Some(entry(2, "airport"));
        comps.signals.clear();
        let c = assemble_caption(&comps, AblationMask::FULL, GenderMode::Full).unwrap();
        assert_eq!(c.text, "A woman in an airport. She is dancing.");
    }

    #[test]
    fn mask_parse_and_display() {
        for mask in AblationMask::ablation_matrix() {
            let s = mask.to_string();
            assert_eq!(s.parse::<AblationMask>().unwrap(), mask);
        }
        assert_eq!(AblationMask::ablation_matrix().len(), 6);
        let m: AblationMask = "age,action".parse().unwrap();
        assert_eq!(m.to_string(), "age,action");
        assert!("no-color".parse::<AblationMask>().is_err());
    }

    fn rigged_store(dim: usize, vocab: &Vocabulary, target: usize) -> EmbeddingStore {
        let mut store = EmbeddingStore::new(dim, 100.0);
        for e in &vocab.entries {
            store
                .insert(text_key(vocab.category, e.index), mock_embedding(3, &e.text, dim))
                .unwrap();
        }
        let target_emb = store
            .get(&text_key(vocab.category, target))
            .unwrap()
            .clone();
        store.insert("img:p:bbox", target_emb).unwrap();
        store
    }

    #[test]
    fn classify_argmax_picks_rigged_entry() {
        let vocabs = VocabularySet::bundled();
        let store = rigged_store(32, &vocabs.gender_age, 4);
        let crop = RegionSpec::crop("p", BBox { x1: 0, y1: 0, x2: 10, y2: 10 }).unwrap();
        let who = classify_argmax(&store, &crop, &vocabs.gender_age).unwrap();
        assert_eq!(who.text, "man");
    }

    #[test]
    fn classify_argmax_ties_go_to_lower_index() {
        let text = "a\nb\nc\nd\ne\nf\ng\nh\n";
        let vocab = Vocabulary::parse(
            VocabularyCategory::GenderAge,
            text,
            "t",
            CardinalityPolicy::Strict,
        )
        .unwrap();
        let mut store = EmbeddingStore::new(4, 100.0);
        let same = Embedding::normalized(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        let other = Embedding::normalized(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        for i in 0..8 {
            let e = if i == 2 || i == 6 { same.clone() } else { other.clone() };
            store.insert(text_key(vocab.category, i), e).unwrap();
        }
        store.insert("img:x:full", same).unwrap();
        let who = classify_argmax(&store, &RegionSpec::full("x"), &vocab).unwrap();
        assert_eq!(who.index, 2);
    }

    #[test]
    fn missing_embedding_propagates() {
        let vocabs = VocabularySet::bundled();
        let store = rigged_store(8, &vocabs.gender_age, 0);
        let err = classify_argmax(&store, &RegionSpec::full("nope"), &vocabs.gender_age).unwrap_err();
        assert!(matches!(err, CaptionError::Embed(EmbedError::MissingEmbedding(k)) if k == "img:nope:full"));
    }
}
