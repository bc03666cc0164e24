//! Append-only response cache: one JSON file per request digest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub path: String,
    pub request: Value,
    pub response: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn file_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Option<CacheEntry> {
        let bytes = std::fs::read(self.file_for(digest)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.digest == digest => Some(entry),
            _ => {
                log::warn!("ignoring unreadable cache entry {digest}");
                None
            }
        }
    }

    /// Stores `entry` unless a file for its digest already exists.
    pub fn put(&self, entry: &CacheEntry) -> std::io::Result<()> {
        let target = self.file_for(&entry.digest);
        if target.exists() {
            return Ok(());
        }
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer_pretty(&mut tmp, entry)?;
        tmp.write_all(b"\n")?;
        match tmp.persist_noclobber(&target) {
            Ok(_) => Ok(()),
            // lost a race against another writer of the same digest
            Err(e) if target.exists() => {
                drop(e);
                Ok(())
            }
            Err(e) => Err(e.error),
        }
    }

    pub fn len(&self) -> usize {
        std::fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_and_no_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path().join("c")).unwrap();
        let entry = CacheEntry {
            digest: "abc".into(),
            path: "/chat/completions".into(),
            request: serde_json::json!({"model": "m"}),
            response: "happiness".into(),
        };
        assert!(cache.get("abc").is_none());
        cache.put(&entry).unwrap();
        assert_eq!(cache.get("abc").unwrap(), entry);
        let changed = CacheEntry {
            response: "sadness".into(),
            ..entry.clone()
        };
        cache.put(&changed).unwrap();
        assert_eq!(cache.get("abc").unwrap().response, "happiness");
        assert_eq!(cache.len(), 1);
    }
}
