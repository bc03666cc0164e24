//! Embedding sources: the NEMB binary store, a deterministic mock, and an
//! HTTP embedding service.
//!
//! NEMB layout (little-endian throughout):
//!
//! ```text
//! "NEMB" | 0x01 | dim: u32 | logit_scale: f32 | count: u32
//! count × ( key_len: u16 | key: UTF-8 | dim × f32 )
//! ```

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taxonomy::{Vocabulary, VocabularyCategory};

pub const MAGIC: &[u8; 4] = b"NEMB";
pub const VERSION: u8 = 0x01;
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;
pub const NORM_TOLERANCE: f64 = 1e-5;
pub const EMBED_URL_ENV: &str = "NARRACAP_EMBED_URL";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("malformed embedding store: {0}")]
    Format(String),
    #[error("embedding {key:?} has norm {norm} (expected 1 ± {NORM_TOLERANCE})")]
    Integrity { key: String, norm: f64 },
    #[error("missing embedding {0:?}")]
    MissingEmbedding(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dim { expected: usize, actual: usize },
    #[error("embedding service error: {0}")]
    Service(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense unit-norm vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Wraps an already-normalized vector, checking the norm.
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        let emb = Embedding(values);
        let norm = emb.norm();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbedError::Integrity {
                key: String::new(),
                norm,
            });
        }
        Ok(emb)
    }

    /// Scales `values` to unit length. Returns `None` for the zero vector.
    pub fn normalized(values: &[f64]) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(Embedding(values.iter().map(|v| (v / norm) as f32).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Inner product accumulated in f64.
    pub fn dot(&self, other: &Embedding) -> Result<f64, EmbedError> {
        if self.dim() != other.dim() {
            return Err(EmbedError::Dim {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl BBox {
    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Full,
    Bbox,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Full => "full",
            Region::Bbox => "bbox",
        }
    }
}

/// An image or a person crop within it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RegionSpec {
    pub image_id: String,
    pub region: Region,
    pub bbox: Option<BBox>,
}

impl RegionSpec {
    pub fn full(image_id: impl Into<String>) -> Self {
        RegionSpec {
            image_id: image_id.into(),
            region: Region::Full,
            bbox: None,
        }
    }

    pub fn crop(image_id: impl Into<String>, bbox: BBox) -> Result<Self, EmbedError> {
        if !bbox.is_valid() {
            return Err(EmbedError::Format(format!("invalid bbox {bbox:?}")));
        }
        Ok(RegionSpec {
            image_id: image_id.into(),
            region: Region::Bbox,
            bbox: Some(bbox),
        })
    }

    /// Store key: `img:{image_id}:{full|bbox}`.
    pub fn key(&self) -> String {
        image_key(&self.image_id, self.region)
    }

    /// Crop key qualified by box coordinates, used to tell apart several
    /// people in one image.
    pub fn instance_key(&self) -> Option<String> {
        self.bbox.map(|b| {
            format!(
                "img:{}:bbox:{},{},{},{}",
                self.image_id, b.x1, b.y1, b.x2, b.y2
            )
        })
    }
}

impl fmt::Display for RegionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

pub fn text_key(category: VocabularyCategory, index: usize) -> String {
    format!("text:{}:{}", category.as_str(), index)
}

pub fn image_key(image_id: &str, region: Region) -> String {
    format!("img:{}:{}", image_id, region.as_str())
}

/// In-memory NEMB store. Entry order is file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    raw_logit_scale: f32,
    entries: IndexMap<String, Embedding>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, logit_scale: f32) -> Self {
        EmbeddingStore {
            dim,
            raw_logit_scale: logit_scale,
            entries: IndexMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Effective logit scale; a non-positive or non-finite stored value
    /// means "not recorded" and falls back to [`DEFAULT_LOGIT_SCALE`].
    pub fn logit_scale(&self) -> f64 {
        let raw = f64::from(self.raw_logit_scale);
        if raw.is_finite() && raw > 0.0 {
            raw
        } else {
            DEFAULT_LOGIT_SCALE
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, embedding: Embedding) -> Result<(), EmbedError> {
        let key = key.into();
        if embedding.dim() != self.dim {
            return Err(EmbedError::Dim {
                expected: self.dim,
                actual: embedding.dim(),
            });
        }
        if key.len() > usize::from(u16::MAX) {
            return Err(EmbedError::Format(format!("key too long: {} bytes", key.len())));
        }
        if self.entries.contains_key(&key) {
            return Err(EmbedError::Format(format!("duplicate key {key:?}")));
        }
        self.entries.insert(key, embedding);
        Ok(())
    }

    pub fn remove(&mut self, key: &str) -> Option<Embedding> {
        self.entries.shift_remove(key)
    }

    pub fn get(&self, key: &str) -> Result<&Embedding, EmbedError> {
        self.entries
            .get(key)
            .ok_or_else(|| EmbedError::MissingEmbedding(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get_text_embedding(
        &self,
        category: VocabularyCategory,
        index: usize,
    ) -> Result<&Embedding, EmbedError> {
        self.get(&text_key(category, index))
    }

    /// Looks up a region. Crops try the coordinate-qualified key first.
    pub fn get_image_embedding(&self, region: &RegionSpec) -> Result<&Embedding, EmbedError> {
        if let Some(key) = region.instance_key() {
            if let Some(e) = self.entries.get(&key) {
                return Ok(e);
            }
        }
        self.get(&region.key())
    }

    pub fn read_from(mut reader: impl Read) -> Result<Self, EmbedError> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(EmbedError::Format("bad magic".into()));
        }
        let version = cur.take(1)?[0];
        if version != VERSION {
            return Err(EmbedError::Format(format!("unsupported version {version}")));
        }
        let dim = cur.u32()? as usize;
        if dim == 0 {
            return Err(EmbedError::Format("dimension is zero".into()));
        }
        let raw_logit_scale = cur.f32()?;
        let count = cur.u32()? as usize;
        let mut store = EmbeddingStore::new(dim, raw_logit_scale);
        for _ in 0..count {
            let key_len = usize::from(cur.u16()?);
            let key = std::str::from_utf8(cur.take(key_len)?)
                .map_err(|_| EmbedError::Format("key is not UTF-8".into()))?
                .to_string();
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(cur.f32()?);
            }
            let emb = Embedding(values);
            let norm = emb.norm();
            if (norm - 1.0).abs() > NORM_TOLERANCE || !norm.is_finite() {
                return Err(EmbedError::Integrity { key, norm });
            }
            if store.entries.insert(key.clone(), emb).is_some() {
                return Err(EmbedError::Format(format!("duplicate key {key:?}")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(EmbedError::Format(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.len() * (2 + 24 + self.dim * 4));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.raw_logit_scale.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (key, emb) in &self.entries {
            out.extend_from_slice(&(key.len() as u16).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for v in emb.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write_to(&self, mut writer: impl Write) -> Result<(), EmbedError> {
        writer.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn open_store(path: &Path) -> Result<EmbeddingStore, EmbedError> {
    let bytes = std::fs::read(path)?;
    EmbeddingStore::from_bytes(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbedError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| EmbedError::Format(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, EmbedError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, EmbedError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, EmbedError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Deterministic pseudo-random unit vector for `(seed, key)`.
pub fn mock_embedding(seed: u64, key: &str, dim: usize) -> Embedding {
    assert!(dim >= 2, "mock embeddings need dim >= 2");
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(rng_seed);
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Some(e) = Embedding::normalized(&raw) {
            return e;
        }
    }
}

/// Where embeddings come from during a run.
pub trait EmbeddingSource: Send + Sync {
    fn logit_scale(&self) -> f64;

    /// One embedding per vocabulary entry, in entry order.
    fn text_embeddings(&self, vocab: &Vocabulary) -> Result<Vec<Embedding>, EmbedError>;

    fn image_embedding(&self, region: &RegionSpec) -> Result<Embedding, EmbedError>;
}

impl EmbeddingSource for EmbeddingStore {
    fn logit_scale(&self) -> f64 {
        EmbeddingStore::logit_scale(self)
    }

    fn text_embeddings(&self, vocab: &Vocabulary) -> Result<Vec<Embedding>, EmbedError> {
        vocab
            .entries
            .iter()
            .map(|e| self.get_text_embedding(vocab.category, e.index).cloned())
            .collect()
    }

    fn image_embedding(&self, region: &RegionSpec) -> Result<Embedding, EmbedError> {
        self.get_image_embedding(region).cloned()
    }
}

/// Embeddings derived from [`mock_embedding`] over the store key scheme.
#[derive(Debug, Clone)]
pub struct MockSource {
    pub seed: u64,
    pub dim: usize,
    pub logit_scale: f64,
}

impl EmbeddingSource for MockSource {
    fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    fn text_embeddings(&self, vocab: &Vocabulary) -> Result<Vec<Embedding>, EmbedError> {
        Ok(vocab
            .entries
            .iter()
            .map(|e| mock_embedding(self.seed, &text_key(vocab.category, e.index), self.dim))
            .collect())
    }

    fn image_embedding(&self, region: &RegionSpec) -> Result<Embedding, EmbedError> {
        Ok(mock_embedding(self.seed, &region.key(), self.dim))
    }
}

#[derive(Debug, Serialize)]
struct EmbedTextRequest<'a> {
    texts: &'a [String],
}

#[derive(Debug, Serialize)]
struct EmbedImageRequest<'a> {
    image_id: &'a str,
    region: Region,
    #[serde(skip_serializing_if = "Option::is_none")]
    bbox: Option<[i64; 4]>,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// Client for an embedding service exposing `POST /embed_text` and
/// `POST /embed_image`. The service renders crops itself.
pub struct HttpEmbeddingSource {
    base_url: String,
    logit_scale: f64,
    batch_size: usize,
    agent: ureq::Agent,
}

impl HttpEmbeddingSource {
    pub fn new(base_url: impl Into<String>, logit_scale: f64) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .new_agent();
        HttpEmbeddingSource {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            logit_scale,
            batch_size: 256,
            agent,
        }
    }

    /// Reads the service address from `NARRACAP_EMBED_URL`.
    pub fn from_env(logit_scale: f64) -> Option<Self> {
        std::env::var(EMBED_URL_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .map(|url| Self::new(url, logit_scale))
    }

    fn post<T: Serialize>(&self, path: &str, body: &T) -> Result<Vec<Embedding>, EmbedError> {
        let url = format!("{}{}", self.base_url, path);
        let mut response = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| EmbedError::Service(format!("{url}: {e}")))?;
        let status = response.status().as_u16();
        if status != 200 {
            return Err(EmbedError::Service(format!("{url}: HTTP {status}")));
        }
        let parsed: EmbedResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Service(format!("{url}: bad response body: {e}")))?;
        parsed
            .vectors
            .into_iter()
            .map(|v| {
                let emb = Embedding(v);
                let norm = emb.norm();
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    Err(EmbedError::Integrity {
                        key: url.clone(),
                        norm,
                    })
                } else {
                    Ok(emb)
                }
            })
            .collect()
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let vectors = self.post("/embed_text", &EmbedTextRequest { texts: chunk })?;
            if vectors.len() != chunk.len() {
                return Err(EmbedError::Service(format!(
                    "asked for {} text vectors, got {}",
                    chunk.len(),
                    vectors.len()
                )));
            }
            out.extend(vectors);
        }
        check_uniform_dim(&out)?;
        Ok(out)
    }
}

fn check_uniform_dim(vectors: &[Embedding]) -> Result<(), EmbedError> {
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|v| v.dim() != first.dim()) {
            return Err(EmbedError::Dim {
                expected: first.dim(),
                actual: bad.dim(),
            });
        }
    }
    Ok(())
}

impl EmbeddingSource for HttpEmbeddingSource {
    fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    fn text_embeddings(&self, vocab: &Vocabulary) -> Result<Vec<Embedding>, EmbedError> {
        self.embed_texts(&vocab.prompts())
    }

    fn image_embedding(&self, region: &RegionSpec) -> Result<Embedding, EmbedError> {
        let body = EmbedImageRequest {
            image_id: &region.image_id,
            region: region.region,
            bbox: region.bbox.map(|b| [b.x1, b.y1, b.x2, b.y2]),
        };
        self.post("/embed_image", &body)?
            .into_iter()
            .next()
            .ok_or_else(|| EmbedError::MissingEmbedding(region.key()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(values: &[f64]) -> Embedding {
        Embedding::normalized(values).unwrap()
    }

    fn two_entry_store() -> EmbeddingStore {
        let mut store = EmbeddingStore::new(4, 100.0);
        store.insert("text:gender_age:0", unit(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        store.insert("img:0001:full", unit(&[0.5, 0.5, 0.5, 0.5])).unwrap();
        store
    }

    #[test]
    fn store_round_trip() {
        let store = two_entry_store();
        let bytes = store.to_bytes();
        assert_eq!(&bytes[..5], b"NEMB\x01");
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(
            back.get_text_embedding(VocabularyCategory::GenderAge, 0).unwrap(),
            store.get("text:gender_age:0").unwrap()
        );
        assert!(back.get_image_embedding(&RegionSpec::full("0001")).is_ok());
    }

    #[test]
    fn missing_bbox_key_is_reported() {
        let store = two_entry_store();
        let crop = RegionSpec::crop("0001", BBox { x1: 0, y1: 0, x2: 5, y2: 5 }).unwrap();
        match store.get_image_embedding(&crop) {
            Err(EmbedError::MissingEmbedding(key)) => assert_eq!(key, "img:0001:bbox"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_unit_vector_fails_integrity() {
        let mut bytes = two_entry_store().to_bytes();
        // halve the first float of the first vector: 1.0 -> 0.5
        let first_value = 17 + 2 + "text:gender_age:0".len();
        bytes[first_value..first_value + 4].copy_from_slice(&0.5f32.to_le_bytes());
        match EmbeddingStore::from_bytes(&bytes) {
            Err(EmbedError::Integrity { key, norm }) => {
                assert_eq!(key, "text:gender_age:0");
                assert!((norm - 0.5).abs() < 1e-9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_and_bad_magic_are_format_errors() {
        let bytes = two_entry_store().to_bytes();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                EmbeddingStore::from_bytes(&bytes[..cut]),
                Err(EmbedError::Format(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(EmbedError::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 2;
        assert!(matches!(
            EmbeddingStore::from_bytes(&bad_version),
            Err(EmbedError::Format(_))
        ));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(
            EmbeddingStore::from_bytes(&trailing),
            Err(EmbedError::Format(_))
        ));
    }

    #[test]
    fn omitted_logit_scale_defaults_to_100() {
        let store = EmbeddingStore::new(4, 0.0);
        assert_eq!(store.logit_scale(), DEFAULT_LOGIT_SCALE);
        assert_eq!(EmbeddingStore::new(4, f32::NAN).logit_scale(), 100.0);
        assert_eq!(EmbeddingStore::new(4, 42.5).logit_scale(), 42.5);
    }

    #[test]
    fn mock_embedding_is_deterministic_and_unit() {
        let a = mock_embedding(7, "a", 8);
        let b = mock_embedding(7, "a", 8);
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = mock_embedding(8, "a", 8);
        assert_ne!(a, c);
        assert_ne!(a, mock_embedding(7, "b", 8));
        for key in ["a", "b", "text:signals:3"] {
            let v = mock_embedding(3, key, 512);
            assert!((v.norm() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn dot_checks_dimensions() {
        let a = mock_embedding(1, "x", 4);
        let b = mock_embedding(1, "x", 5);
        assert!(matches!(a.dot(&b), Err(EmbedError::Dim { expected: 4, actual: 5 })));
    }

    #[test]
    fn instance_key_takes_precedence_for_crops() {
        let mut store = EmbeddingStore::new(4, 100.0);
        let bbox = BBox { x1: 1, y1: 2, x2: 3, y2: 4 };
        let crop = RegionSpec::crop("im", bbox).unwrap();
        store.insert("img:im:bbox", unit(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        store
            .insert("img:im:bbox:1,2,3,4", unit(&[0.0, 1.0, 0.0, 0.0]))
            .unwrap();
        assert_eq!(store.get_image_embedding(&crop).unwrap().as_slice()[1], 1.0);
    }
}
