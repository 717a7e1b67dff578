//! Embedding cache keyed by (model id, text hash).
//!
//! Lookups take a shared lock; inserts take the write lock. The cache file is
//! rewritten in key order on [`CachedEmbedder::persist`], so its bytes do not
//! depend on the order in which texts were first embedded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{EmbeddingVector, Embedder, ProviderError};
use crate::ids::text_hash;
use crate::store;

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    text_hash: String,
    model: String,
    vector: Vec<f64>,
}

pub struct CachedEmbedder<E> {
    inner: E,
    model: String,
    path: Option<PathBuf>,
    entries: RwLock<BTreeMap<(String, String), EmbeddingVector>>,
}

impl<E: Embedder> CachedEmbedder<E> {
    /// In-memory cache only.
    pub fn new(inner: E) -> Self {
        CachedEmbedder {
            model: inner.model_id(),
            inner,
            path: None,
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    /// Cache backed by a line-delimited file; existing entries are loaded.
    pub fn open(inner: E, path: &Path) -> Result<Self, ProviderError> {
        let mut entries = BTreeMap::new();
        if path.exists() {
            let lines: Vec<CacheLine> =
                store::read_jsonl(path).map_err(|e| ProviderError::Cache(e.to_string()))?;
            for line in lines {
                entries.insert((line.model, line.text_hash), EmbeddingVector::new(line.vector));
            }
        }
        Ok(CachedEmbedder {
            model: inner.model_id(),
            inner,
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    /// Write all entries to the backing file, if any.
    pub fn persist(&self) -> Result<(), ProviderError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let entries = self.entries.read().expect("cache lock");
        let mut out = Vec::new();
        for ((model, hash), v) in entries.iter() {
            let line = CacheLine {
                text_hash: hash.clone(),
                model: model.clone(),
                vector: v.values().to_vec(),
            };
            serde_json::to_writer(&mut out, &line).expect("cache line serializes");
            out.push(b'\n');
        }
        store::write_atomic(path, &out).map_err(|e| ProviderError::Cache(e.to_string()))
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn model_id(&self) -> String {
        self.model.clone()
    }

    fn dims(&self) -> Option<usize> {
        self.inner.dims()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let keys: Vec<(String, String)> = texts
            .iter()
            .map(|t| (self.model.clone(), text_hash(t)))
            .collect();
        let mut out: Vec<Option<EmbeddingVector>> = {
            let entries = self.entries.read().expect("cache lock");
            keys.iter().map(|k| entries.get(k).cloned()).collect()
        };
        let mut missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        // embed each distinct missing text once
        let mut seen = std::collections::HashSet::new();
        missing.retain(|&i| seen.insert(keys[i].clone()));
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.inner.embed(&batch)?;
            if vectors.len() != batch.len() {
                return Err(ProviderError::Response(format!(
                    "asked for {} embeddings, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            let mut entries = self.entries.write().expect("cache lock");
            for (&i, v) in missing.iter().zip(vectors) {
                entries.insert(keys[i].clone(), v);
            }
            for (i, slot) in out.iter_mut().enumerate() {
                if slot.is_none() {
                    *slot = entries.get(&keys[i]).cloned();
                }
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{Metered, MockEmbedder};

    #[test]
    fn second_call_is_served_from_cache() {
        let cache = CachedEmbedder::new(Metered::new(MockEmbedder::default()));
        let texts = vec!["咳嗽 发热".to_string(), "头痛".to_string(), "咳嗽 发热".to_string()];
        let first = cache.embed(&texts).unwrap();
        assert_eq!(cache.inner().calls(), 1);
        assert_eq!(cache.inner().items(), 2);
        let second = cache.embed(&texts).unwrap();
        assert_eq!(cache.inner().calls(), 1);
        assert_eq!(first, second);
    }

    #[test]
    fn persisted_cache_is_bit_identical_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let texts = vec!["alpha beta".to_string(), "gamma".to_string()];
        let first = {
            let c = CachedEmbedder::open(MockEmbedder::default(), &path).unwrap();
            let v = c.embed(&texts).unwrap();
            c.persist().unwrap();
            v
        };
        let reversed: Vec<String> = texts.iter().rev().cloned().collect();
        let c = CachedEmbedder::open(Metered::new(MockEmbedder::default()), &path).unwrap();
        let again = c.embed(&texts).unwrap();
        assert_eq!(c.inner().calls(), 0);
        assert_eq!(first, again);
        let bytes = std::fs::read(&path).unwrap();
        let c2 = CachedEmbedder::open(MockEmbedder::default(), &dir.path().join("other.jsonl")).unwrap();
        c2.embed(&reversed).unwrap();
        c2.persist().unwrap();
        assert_eq!(bytes, std::fs::read(dir.path().join("other.jsonl")).unwrap());
    }
}
