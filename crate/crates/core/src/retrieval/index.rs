//! Exact cosine top-k over a sealed set of embeddings.
//!
//! Scoring is a full scan; selection uses a partial sort. Results are ordered
//! by descending score, ties broken by ascending item id.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::providers::EmbeddingVector;
use crate::store::{StoreError, SCHEMA_VERSION};

use super::RetrievalError;

const MAGIC: &[u8; 4] = b"KGVI";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Snippet,
    Triple,
    Chain,
}

impl ItemKind {
    fn code(self) -> u8 {
        match self {
            ItemKind::Snippet => 0,
            ItemKind::Triple => 1,
            ItemKind::Chain => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ItemKind::Snippet),
            1 => Some(ItemKind::Triple),
            2 => Some(ItemKind::Chain),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub item_id: String,
    pub score: f64,
}

/// Descending score, then ascending id.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.item_id.cmp(&b.item_id))
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dims() != b.dims() {
        return Err(RetrievalError::DimensionMismatch {
            expected: a.dims(),
            found: b.dims(),
        });
    }
    if a.is_degenerate() || b.is_degenerate() {
        return Err(RetrievalError::DegenerateEmbedding);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm() * b.norm())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    kind: ItemKind,
    model_id: String,
    dims: usize,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    skipped: Vec<String>,
}

impl VectorIndex {
    /// Build and seal an index. Vectors are stored at `f32` precision.
    /// Degenerate (zero-norm) vectors can never be scored, so they are left
    /// out and listed in [`VectorIndex::skipped`].
    pub fn build(
        kind: ItemKind,
        model_id: &str,
        dims: usize,
        entries: Vec<(String, EmbeddingVector)>,
    ) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut skipped = Vec::new();
        for (id, v) in entries {
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateId(id));
            }
            if v.dims() != dims {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dims,
                    found: v.dims(),
                });
            }
            let v = v.to_f32_precision();
            if v.is_degenerate() {
                skipped.push(id);
                continue;
            }
            ids.push(id);
            vectors.push(v);
        }
        if !skipped.is_empty() {
            tracing::warn!(count = skipped.len(), "skipped degenerate embeddings");
        }
        Ok(VectorIndex {
            kind,
            model_id: model_id.to_string(),
            dims,
            ids,
            vectors,
            skipped,
        })
    }

    pub fn kind(&self) -> ItemKind {
        self.kind
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    pub fn vector(&self, id: &str) -> Option<&EmbeddingVector> {
        self.ids.iter().position(|i| i == id).map(|p| &self.vectors[p])
    }

    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>, RetrievalError> {
        self.top_k_where(query, k, |_| true)
    }

    /// Top-k restricted to ids accepted by `keep`.
    pub fn top_k_where<F>(
        &self,
        query: &EmbeddingVector,
        k: usize,
        keep: F,
    ) -> Result<Vec<Hit>, RetrievalError>
    where
        F: Fn(&str) -> bool,
    {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.ids.is_empty() {
            return Ok(Vec::new());
        }
        if query.dims() != self.dims {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dims,
                found: query.dims(),
            });
        }
        if query.is_degenerate() {
            return Err(RetrievalError::DegenerateEmbedding);
        }
        let mut hits = Vec::with_capacity(self.ids.len());
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            if !keep(id) {
                continue;
            }
            hits.push(Hit {
                item_id: id.clone(),
                score: cosine(query, v)?,
            });
        }
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, rank_order);
            hits.truncate(k);
        }
        hits.sort_by(rank_order);
        Ok(hits)
    }

    /// Header, packed little-endian f32 vectors, then the id table.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let mut out = Vec::with_capacity(32 + self.ids.len() * (self.dims * 4 + 40));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(SCHEMA_VERSION as u16).to_le_bytes());
        out.push(self.kind.code());
        out.push(0);
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        let model = self.model_id.as_bytes();
        out.extend_from_slice(&(model.len() as u16).to_le_bytes());
        out.extend_from_slice(model);
        for v in &self.vectors {
            for &x in v.values() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        for id in &self.ids {
            let bytes = id.as_bytes();
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        let mut file = std::fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
        file.write_all(&out).map_err(|e| StoreError::io(path, e))?;
        Ok(())
    }

    /// Load an index, refusing a different embedding model or dimension.
    pub fn load(
        path: &Path,
        expected_model: &str,
        expected_dims: Option<usize>,
    ) -> Result<Self, RetrievalError> {
        let bytes = std::fs::read(path).map_err(|e| StoreError::io(path, e))?;
        let bad = |msg: &str| {
            RetrievalError::Store(StoreError::Invalid(format!("{}: {msg}", path.display())))
        };
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("not a vector index"));
        }
        let version = u16::from_le_bytes(r.array().ok_or_else(|| bad("truncated header"))?);
        if u32::from(version) > SCHEMA_VERSION {
            return Err(RetrievalError::Store(StoreError::SchemaTooNew {
                path: path.to_path_buf(),
                found: u32::from(version),
                supported: SCHEMA_VERSION,
            }));
        }
        let head: [u8; 2] = r.array().ok_or_else(|| bad("truncated header"))?;
        let kind = ItemKind::from_code(head[0]).ok_or_else(|| bad("unknown item kind"))?;
        let dims = u32::from_le_bytes(r.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let count = u64::from_le_bytes(r.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let model_len = u16::from_le_bytes(r.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let model = std::str::from_utf8(r.take(model_len).ok_or_else(|| bad("truncated model id"))?)
            .map_err(|_| bad("model id is not UTF-8"))?
            .to_string();
        if model != expected_model {
            return Err(RetrievalError::ModelMismatch {
                expected: expected_model.to_string(),
                found: model,
            });
        }
        if let Some(d) = expected_dims {
            if d != dims {
                return Err(RetrievalError::DimensionMismatch {
                    expected: d,
                    found: dims,
                });
            }
        }
        let table = count
            .checked_mul(dims)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("vector table size overflow"))?;
        let raw = r.take(table).ok_or_else(|| bad("truncated vector table"))?;
        let vectors: Vec<EmbeddingVector> = raw
            .chunks_exact(dims.max(1) * 4)
            .take(count)
            .map(|chunk| {
                EmbeddingVector::new(
                    chunk
                        .chunks_exact(4)
                        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                        .collect(),
                )
            })
            .collect();
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(r.array().ok_or_else(|| bad("truncated id table"))?) as usize;
            let id = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated id table"))?)
                .map_err(|_| bad("id is not UTF-8"))?;
            ids.push(id.to_string());
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let entries = ids.into_iter().zip(vectors).collect();
        VectorIndex::build(kind, &model, dims, entries)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }
}

/// Index summary recorded in artifact manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexInfo {
    pub kind: ItemKind,
    pub model_id: String,
    pub dims: usize,
    pub count: usize,
}

impl From<&VectorIndex> for IndexInfo {
    fn from(i: &VectorIndex) -> Self {
        IndexInfo {
            kind: i.kind,
            model_id: i.model_id.clone(),
            dims: i.dims,
            count: i.len(),
        }
    }
}
