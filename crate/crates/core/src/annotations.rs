//! Normalized per-person annotation records, person counts, and the rigged
//! synthetic fixture used by tests and the `synth` subcommand.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{assemble_caption, AblationMask, CaptionComponents, GenderMode};
use crate::embed::{mock_embedding, text_key, BBox, Embedding, EmbeddingStore, RegionSpec};
use crate::llm::mock::mock_labels;
use crate::taxonomy::{parse_label, LabelSet, VocabEntry, Vocabulary, VocabularySet};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("{source_name}:{line}: {message}")]
    Format {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{source_name}:{line}: unknown label {label:?}")]
    UnknownLabel {
        source_name: String,
        line: usize,
        label: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One annotated person.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub image_path: String,
    pub bbox: BBox,
    pub labels_by_annotator: Vec<LabelSet>,
    pub split: Split,
}

impl AnnotationRecord {
    /// Union over annotators.
    pub fn combined(&self) -> LabelSet {
        self.labels_by_annotator
            .iter()
            .fold(LabelSet::empty(), |acc, s| acc.union(*s))
    }

    pub fn crop(&self) -> RegionSpec {
        RegionSpec {
            image_id: self.image_id.clone(),
            region: crate::embed::Region::Bbox,
            bbox: Some(self.bbox),
        }
    }

    pub fn full(&self) -> RegionSpec {
        RegionSpec::full(self.image_id.clone())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&RawRecord::from(self)).expect("record serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: String,
    image_path: String,
    bbox: [i64; 4],
    labels_by_annotator: Vec<Vec<String>>,
    split: Split,
}

impl From<&AnnotationRecord> for RawRecord {
    fn from(r: &AnnotationRecord) -> Self {
        RawRecord {
            image_id: r.image_id.clone(),
            image_path: r.image_path.clone(),
            bbox: [r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2],
            labels_by_annotator: r
                .labels_by_annotator
                .iter()
                .map(|s| s.names().into_iter().map(String::from).collect())
                .collect(),
            split: r.split,
        }
    }
}

/// Parses one JSON line. `Ok(None)` for blank lines.
fn parse_line(text: &str, source_name: &str, line: usize) -> Result<Option<AnnotationRecord>, AnnotationError> {
    if text.trim().is_empty() {
        return Ok(None);
    }
    let format_err = |message: String| AnnotationError::Format {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| format_err(e.to_string()))?;
    if raw.image_id.is_empty() {
        return Err(format_err("empty image_id".into()));
    }
    let [x1, y1, x2, y2] = raw.bbox;
    let bbox = BBox { x1, y1, x2, y2 };
    if !bbox.is_valid() || x1 < 0 || y1 < 0 {
        return Err(format_err(format!("invalid bbox {:?}", raw.bbox)));
    }
    if raw.labels_by_annotator.is_empty() {
        return Err(format_err("labels_by_annotator is empty".into()));
    }
    let mut labels_by_annotator = Vec::with_capacity(raw.labels_by_annotator.len());
    for names in &raw.labels_by_annotator {
        let mut set = LabelSet::empty();
        for name in names {
            let label = parse_label(name).map_err(|_| AnnotationError::UnknownLabel {
                source_name: source_name.to_string(),
                line,
                label: name.clone(),
            })?;
            set.insert(label);
        }
        labels_by_annotator.push(set);
    }
    Ok(Some(AnnotationRecord {
        image_id: raw.image_id,
        image_path: raw.image_path,
        bbox,
        labels_by_annotator,
        split: raw.split,
    }))
}

/// Parses a JSONL annotation file body. Records whose combined label set is
/// empty are dropped with a warning.
pub fn parse_annotations(text: &str, source_name: &str) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(record) = parse_line(line, source_name, i + 1)? {
            if record.combined().is_empty() {
                log::warn!("{source_name}:{}: dropping record with no labels", i + 1);
                continue;
            }
            out.push(record);
        }
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    let io_err = |source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(io_err)?);
        text.push('\n');
    }
    parse_annotations(&text, &path.display().to_string())
}

pub fn write_annotations(records: &[AnnotationRecord], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    out.flush()
}

/// Person-count stratum of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = ">2")]
    Many,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::One, Stratum::Two, Stratum::Many];

    pub fn from_count(count: usize) -> Stratum {
        match count {
            0 | 1 => Stratum::One,
            2 => Stratum::Two,
            _ => Stratum::Many,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::One => "1",
            Stratum::Two => "2",
            Stratum::Many => ">2",
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Number of annotated people per image.
pub fn person_count_index(records: &[AnnotationRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.image_id.clone()).or_insert(0) += 1;
    }
    counts
}

/// Stratum of every record, in record order.
pub fn strata(records: &[AnnotationRecord]) -> Vec<Stratum> {
    let counts = person_count_index(records);
    records
        .iter()
        .map(|r| Stratum::from_count(counts[&r.image_id]))
        .collect()
}

/// Mean size of the combined ground truth.
pub fn mean_labels_per_person(records: &[AnnotationRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.combined().len()).sum::<usize>() as f64 / records.len() as f64
}

pub const SYNTH_DIM: usize = 128;
pub const SYNTH_LOGIT_SCALE: f32 = 100.0;

/// Action, environment and crop signals of one curated scene. Together the
/// scenes trigger every taxonomy label in the mock LLM.
const SCENES: [(&str, &str, &[&str]); 12] = [
    ("belly dancing", "beach", &["Has a wide grin"]),
    ("crying", "funeral home", &["Has a bowed head", "Has a pained or watery gaze"]),
    ("arguing", "classroom", &["Has a clenched jaw", "Has arms crossing in front of the chest"]),
    ("hugging", "wedding reception", &["Has a silly grin"]),
    ("skydiving", "beach", &["Has an open mouth"]),
    ("praying", "cemetery", &["Has a downturned mouth", "Has a yearning look"]),
    ("sleeping", "hospital room", &["Has a grimace or pained look"]),
    ("studying", "classroom", &["Has a head tilt", "Has a wrinkled brow"]),
    ("celebrating", "house party", &["Has a high chin", "Has a thrust-out chest", "Has an overall visage that glows"]),
    ("yawning", "prison", &["Has a distant or empty stare"]),
    ("eating cake", "birthday party", &["Has a wrinkled nose"]),
    ("comforting someone", "emergency room", &["Has a tension-filled expression"]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedPerson {
    pub image_id: String,
    pub bbox: BBox,
    pub components: CaptionComponents,
    /// Full-mask caption under the default `std:9` rule.
    pub caption: String,
    /// What the mock LLM answers for `caption`; also the ground truth.
    pub labels: LabelSet,
}

#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub records: Vec<AnnotationRecord>,
    pub store: EmbeddingStore,
    pub expected: Vec<ExpectedPerson>,
}

impl SynthFixture {
    /// Writes `annotations.jsonl`, `store.nemb` and `expected.jsonl`.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        write_annotations(&self.records, &dir.join("annotations.jsonl"))?;
        std::fs::write(dir.join("store.nemb"), self.store.to_bytes())?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("expected.jsonl"))?);
        for e in &self.expected {
            writeln!(out, "{}", serde_json::to_string(e).expect("serializes"))?;
        }
        out.flush()
    }
}

fn find_entry(vocab: &Vocabulary, text: &str) -> VocabEntry {
    vocab
        .entries
        .iter()
        .find(|e| e.text == text)
        .unwrap_or_else(|| panic!("{text:?} missing from bundled {} vocabulary", vocab.category))
        .clone()
}

/// Solves the small dense system `g a = b` by Gaussian elimination with
/// partial pivoting.
fn solve(mut g: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| g[i][col].abs().total_cmp(&g[j][col].abs()))
            .unwrap();
        g.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = g[row][col] / g[col][col];
            for k in col..n {
                g[row][k] -= f * g[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut a = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| g[row][k] * a[k]).sum();
        a[row] = (b[row] - tail) / g[row][row];
    }
    a
}

/// Unit vector with the same dot product against every target.
fn equidistant(targets: &[&Embedding]) -> Embedding {
    let rows: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| t.as_slice().iter().map(|&x| f64::from(x)).collect())
        .collect();
    let gram: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| rows.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let coef = solve(gram, vec![1.0; rows.len()]);
    let dim = rows[0].len();
    let combo: Vec<f64> = (0..dim)
        .map(|d| rows.iter().zip(&coef).map(|(r, c)| r[d] * c).sum())
        .collect();
    Embedding::normalized(&combo).expect("targets are linearly independent")
}

fn text_bank(store: &mut EmbeddingStore, seed: u64, vocab: &Vocabulary) -> Vec<Embedding> {
    vocab
        .entries
        .iter()
        .map(|e| {
            let key = text_key(vocab.category, e.index);
            let emb = mock_embedding(seed, &key, SYNTH_DIM);
            store.insert(key, emb.clone()).expect("fresh key");
            emb
        })
        .collect()
}

/// Deterministic fixture whose image embeddings are built so that the
/// captioning stage selects the curated scene for each image.
pub fn synth_fixture(seed: u64, n_images: usize, n_persons_per_image: usize) -> SynthFixture {
    assert!(n_images >= 1 && n_persons_per_image >= 1);
    let vocabs = VocabularySet::bundled();
    let mut store = EmbeddingStore::new(SYNTH_DIM, SYNTH_LOGIT_SCALE);
    let gender_age = text_bank(&mut store, seed, &vocabs.gender_age);
    let actions = text_bank(&mut store, seed, &vocabs.actions);
    let signals = text_bank(&mut store, seed, &vocabs.signals);
    let environments = text_bank(&mut store, seed, &vocabs.environments);
    text_bank(&mut store, seed, &vocabs.emotions);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..SCENES.len()).collect();
    let mut records = Vec::new();
    let mut expected = Vec::new();
    for i in 0..n_images {
        if i % SCENES.len() == 0 {
            order.shuffle(&mut rng);
        }
        let scene = order[i % SCENES.len()];
        let (action_text, env_text, _) = SCENES[scene];
        let image_id = format!("synth_{i:04}");
        let action = find_entry(&vocabs.actions, action_text);
        let environment = find_entry(&vocabs.environments, env_text);
        let full = equidistant(&[&actions[action.index], &environments[environment.index]]);
        store
            .insert(RegionSpec::full(image_id.clone()).key(), full)
            .expect("fresh key");

        for p in 0..n_persons_per_image {
            let (_, _, signal_texts) = SCENES[(scene + p) % SCENES.len()];
            let who = vocabs.gender_age.entries[rng.random_range(0..gender_age.len())].clone();
            let mut chosen: Vec<VocabEntry> = signal_texts
                .iter()
                .map(|t| find_entry(&vocabs.signals, t))
                .collect();
            chosen.sort_by_key(|e| e.index);
            let mut targets = vec![&gender_age[who.index]];
            targets.extend(chosen.iter().map(|e| &signals[e.index]));
            let x1 = 10 + 120 * p as i64;
            let bbox = BBox {
                x1,
                y1: 20,
                x2: x1 + 100,
                y2: 260,
            };
            let crop = RegionSpec::crop(image_id.clone(), bbox).expect("valid bbox");
            let key = if n_persons_per_image == 1 {
                crop.key()
            } else {
                crop.instance_key().expect("crop has a bbox")
            };
            store.insert(key, equidistant(&targets)).expect("fresh key");

            let components = CaptionComponents {
                who: Some(who),
                action: Some(action.clone()),
                environment: Some(environment.clone()),
                signals: chosen,
            };
            let caption = assemble_caption(&components, AblationMask::FULL, GenderMode::Full)
                .expect("complete components")
                .text;
            let labels = mock_labels(&caption);
            records.push(AnnotationRecord {
                image_id: image_id.clone(),
                image_path: format!("images/{image_id}.jpg"),
                bbox,
                labels_by_annotator: split_among_annotators(labels, 3, &mut rng),
                split: Split::Test,
            });
            expected.push(ExpectedPerson {
                image_id: image_id.clone(),
                bbox,
                components,
                caption,
                labels,
            });
        }
    }
    SynthFixture {
        records,
        store,
        expected,
    }
}

/// Each label goes to at least one of `n` annotators; the first annotator
/// always has at least one label.
fn split_among_annotators(labels: LabelSet, n: usize, rng: &mut ChaCha8Rng) -> Vec<LabelSet> {
    let mut out = vec![LabelSet::empty(); n];
    for (i, label) in labels.iter().enumerate() {
        let mask: u32 = if i == 0 { 1 } else { rng.random_range(1..(1u32 << n)) };
        for (a, set) in out.iter_mut().enumerate() {
            if mask & (1 << a) != 0 {
                set.insert(label);
            }
        }
    }
    out
}
