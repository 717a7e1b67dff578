//! Snippet and triple retrieval, and the corpus-level retrieval strategies.
//!
//! | strategy     | evidence                                                   |
//! |--------------|------------------------------------------------------------|
//! | `none`       | nothing                                                    |
//! | `fixed`      | top-k fixed-length segments                                |
//! | `macro`      | top-k title-rendered snippets                              |
//! | `micro`      | top-k triples for the question, expanded through M1        |
//! | `integrated` | union of `macro` hits and `micro` expansions               |
//!
//! `personalized` retrieval over the case-derived graph lives in the engine.

mod index;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::TextUnit;
use crate::kg::{expand_mapping, render_triples, KnowledgeGraph, MappingTable, Triple};
use crate::providers::{Embedder, EmbeddingVector, ProviderError};
use crate::store::StoreError;

pub use index::{cosine, rank_order, Hit, IndexInfo, ItemKind, VectorIndex};

/// Default number of recalled items.
pub const DEFAULT_K: usize = 20;

/// Texts per embedding request when building an index.
pub const INDEX_BATCH: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("degenerate (zero-norm) embedding")]
    DegenerateEmbedding,
    #[error("embedding dimension mismatch: index has {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index was built with embedding model `{found}`, configured model is `{expected}`")]
    ModelMismatch { expected: String, found: String },
    #[error("duplicate item id `{0}`")]
    DuplicateId(String),
    #[error("k must be positive")]
    InvalidK,
    #[error("empty query plan")]
    EmptyQueryPlan,
    #[error("{0} index is not available")]
    MissingIndex(&'static str),
    #[error("strategy `{0}` is served by the engine, not corpus retrieval")]
    UnsupportedStrategy(Strategy),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    Fixed,
    Macro,
    Micro,
    Integrated,
    Personalized,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::None,
        Strategy::Fixed,
        Strategy::Macro,
        Strategy::Micro,
        Strategy::Integrated,
        Strategy::Personalized,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Fixed => "fixed",
            Strategy::Macro => "macro",
            Strategy::Micro => "micro",
            Strategy::Integrated => "integrated",
            Strategy::Personalized => "personalized",
        }
    }

    /// Strategies whose evidence comes through triples.
    pub fn uses_graph(self) -> bool {
        matches!(self, Strategy::Micro | Strategy::Integrated | Strategy::Personalized)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// How a list of query triples becomes a query embedding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripleQueryMode {
    /// One embedding of the newline-joined triple renderings.
    #[default]
    Joined,
    /// One embedding per triple; per-id best score across hops.
    PerHop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Fixed,
    Macro,
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceHit {
    pub item_id: String,
    pub score: f64,
    pub channels: Vec<Channel>,
}

/// Scored, deduplicated evidence with mapping provenance.
///
/// `hits` are ordered by descending score then ascending id. Pure top-k
/// strategies return at most k hits; mapping expansion may return more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub strategy: Strategy,
    pub hits: Vec<EvidenceHit>,
    /// Triples recalled on the way (micro and integrated only).
    pub triple_hits: Vec<Hit>,
    /// Expanded item id -> the recalled triple ids that reached it.
    pub expansions: BTreeMap<String, Vec<String>>,
    /// Triple ids recalled but absent from the mapping.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unmapped_triples: Vec<String>,
}

impl RetrievalResult {
    pub fn empty(strategy: Strategy) -> Self {
        RetrievalResult {
            strategy,
            hits: Vec::new(),
            triple_hits: Vec::new(),
            expansions: BTreeMap::new(),
            unmapped_triples: Vec::new(),
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.item_id.as_str()).collect()
    }
}

/// Embed `units` in batches and seal them into an index.
pub fn build_index(
    kind: ItemKind,
    embedder: &dyn Embedder,
    units: &[TextUnit],
) -> Result<VectorIndex, RetrievalError> {
    let mut entries = Vec::with_capacity(units.len());
    let mut dims = embedder.dims();
    for chunk in units.chunks(INDEX_BATCH) {
        let texts: Vec<String> = chunk.iter().map(|u| u.text.clone()).collect();
        let vectors = embedder.embed(&texts)?;
        if vectors.len() != chunk.len() {
            return Err(ProviderError::Response(format!(
                "asked for {} embeddings, got {}",
                chunk.len(),
                vectors.len()
            ))
            .into());
        }
        for (u, v) in chunk.iter().zip(vectors) {
            let d = *dims.get_or_insert(v.dims());
            if v.dims() != d {
                return Err(ProviderError::DimensionMismatch {
                    expected: d,
                    found: v.dims(),
                }
                .into());
            }
            entries.push((u.id.clone(), v));
        }
    }
    VectorIndex::build(kind, &embedder.model_id(), dims.unwrap_or(0), entries)
}

/// Index every triple of a graph by its canonical rendering.
pub fn build_triple_index(
    embedder: &dyn Embedder,
    graph: &KnowledgeGraph,
) -> Result<VectorIndex, RetrievalError> {
    let units: Vec<TextUnit> = graph
        .triples()
        .map(|t| TextUnit {
            id: t.triple_id.clone(),
            text: t.render(),
        })
        .collect();
    build_index(ItemKind::Triple, embedder, &units)
}

fn embed_one(embedder: &dyn Embedder, text: &str) -> Result<EmbeddingVector, RetrievalError> {
    let mut v = embedder.embed(&[text.to_string()])?;
    v.pop()
        .ok_or_else(|| ProviderError::Response("no embedding returned".into()).into())
}

fn check_index(index: &VectorIndex, embedder: &dyn Embedder) -> Result<(), RetrievalError> {
    let model = embedder.model_id();
    if index.model_id() != model {
        return Err(RetrievalError::ModelMismatch {
            expected: model,
            found: index.model_id().to_string(),
        });
    }
    Ok(())
}

/// Query for triple retrieval.
#[derive(Debug, Clone, Copy)]
pub enum TripleQuery<'a> {
    Triples(&'a [Triple]),
    Text(&'a str),
}

/// The texts to embed for a triple query under `mode`.
pub fn triple_query_texts(query: TripleQuery<'_>, mode: TripleQueryMode) -> Result<Vec<String>, RetrievalError> {
    match query {
        TripleQuery::Text(t) => Ok(vec![t.to_string()]),
        TripleQuery::Triples([]) => Err(RetrievalError::EmptyQueryPlan),
        TripleQuery::Triples(ts) => Ok(match mode {
            TripleQueryMode::Joined => vec![render_triples(ts)],
            TripleQueryMode::PerHop => ts.iter().map(Triple::render).collect(),
        }),
    }
}

/// Top-k over a triple index for already-embedded query vectors.
///
/// With several vectors (per-hop mode) each vector retrieves its own top-k and
/// the lists merge by best score per triple before truncating to k.
pub fn rank_triples<F>(
    index: &VectorIndex,
    queries: &[EmbeddingVector],
    k: usize,
    keep: F,
) -> Result<Vec<Hit>, RetrievalError>
where
    F: Fn(&str) -> bool,
{
    match queries {
        [] => Err(RetrievalError::EmptyQueryPlan),
        [q] => index.top_k_where(q, k, &keep),
        many => {
            let mut best: BTreeMap<String, f64> = BTreeMap::new();
            for q in many {
                for h in index.top_k_where(q, k, &keep)? {
                    let e = best.entry(h.item_id).or_insert(f64::NEG_INFINITY);
                    *e = e.max(h.score);
                }
            }
            let mut hits: Vec<Hit> = best
                .into_iter()
                .map(|(item_id, score)| Hit { item_id, score })
                .collect();
            hits.sort_by(rank_order);
            hits.truncate(k);
            Ok(hits)
        }
    }
}

/// Corpus-side retrieval over the general knowledge indexes.
pub struct Retriever<'a> {
    pub embedder: &'a dyn Embedder,
    pub macro_index: Option<&'a VectorIndex>,
    pub fixed_index: Option<&'a VectorIndex>,
    pub triple_index: Option<&'a VectorIndex>,
    pub m1: Option<&'a MappingTable>,
    pub triple_query: TripleQueryMode,
}

impl<'a> Retriever<'a> {
    fn index(&self, which: &'static str, idx: Option<&'a VectorIndex>) -> Result<&'a VectorIndex, RetrievalError> {
        let idx = idx.ok_or(RetrievalError::MissingIndex(which))?;
        check_index(idx, self.embedder)?;
        Ok(idx)
    }

    /// Top-k title-rendered snippets for a question.
    pub fn retrieve_snippets(&self, question: &str, k: usize) -> Result<Vec<Hit>, RetrievalError> {
        let idx = self.index("macro snippet", self.macro_index)?;
        if idx.is_empty() {
            return Ok(Vec::new());
        }
        idx.top_k(&embed_one(self.embedder, question)?, k)
    }

    /// Top-k general-graph triples for a triple list or raw question.
    pub fn retrieve_triples(&self, query: TripleQuery<'_>, k: usize) -> Result<Vec<Hit>, RetrievalError> {
        let idx = self.index("triple", self.triple_index)?;
        let texts = triple_query_texts(query, self.triple_query)?;
        if idx.is_empty() {
            return Ok(Vec::new());
        }
        let queries = self.embedder.embed(&texts)?;
        rank_triples(idx, &queries, k, |_| true)
    }

    pub fn retrieve_strategy(
        &self,
        question: &str,
        strategy: Strategy,
        k: usize,
    ) -> Result<RetrievalResult, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        match strategy {
            Strategy::None => Ok(RetrievalResult::empty(Strategy::None)),
            Strategy::Personalized => Err(RetrievalError::UnsupportedStrategy(strategy)),
            Strategy::Fixed => {
                let idx = self.index("fixed segment", self.fixed_index)?;
                self.single_channel(idx, question, k, Strategy::Fixed, Channel::Fixed)
            }
            Strategy::Macro => {
                let idx = self.index("macro snippet", self.macro_index)?;
                self.single_channel(idx, question, k, Strategy::Macro, Channel::Macro)
            }
            Strategy::Micro | Strategy::Integrated => {
                let triples = self.index("triple", self.triple_index)?;
                let m1 = self.m1.ok_or(RetrievalError::MissingIndex("M1 mapping"))?;
                let macro_idx = if strategy == Strategy::Integrated {
                    Some(self.index("macro snippet", self.macro_index)?)
                } else {
                    None
                };
                // one embedding serves both channels
                let q = embed_one(self.embedder, question)?;
                let triple_hits = if triples.is_empty() {
                    Vec::new()
                } else {
                    triples.top_k(&q, k)?
                };
                let mut result = expand_hits(strategy, &triple_hits, m1);
                result.triple_hits = triple_hits;
                if let Some(idx) = macro_idx {
                    if !idx.is_empty() {
                        let macro_hits = idx.top_k(&q, k)?;
                        merge_channel(&mut result, &macro_hits, Channel::Macro);
                    }
                }
                Ok(result)
            }
        }
    }

    fn single_channel(
        &self,
        idx: &VectorIndex,
        question: &str,
        k: usize,
        strategy: Strategy,
        channel: Channel,
    ) -> Result<RetrievalResult, RetrievalError> {
        let mut result = RetrievalResult::empty(strategy);
        if idx.is_empty() {
            return Ok(result);
        }
        let hits = idx.top_k(&embed_one(self.embedder, question)?, k)?;
        result.hits = hits
            .into_iter()
            .map(|h| EvidenceHit {
                item_id: h.item_id,
                score: h.score,
                channels: vec![channel],
            })
            .collect();
        Ok(result)
    }
}

/// Follow recalled triples through a mapping. Each reached item scores the
/// best score among the triples that reached it.
pub fn expand_hits(strategy: Strategy, triple_hits: &[Hit], mapping: &MappingTable) -> RetrievalResult {
    let scores: BTreeMap<&str, f64> = triple_hits
        .iter()
        .map(|h| (h.item_id.as_str(), h.score))
        .collect();
    let expansion = expand_mapping(mapping, triple_hits.iter().map(|h| h.item_id.as_str()));
    let mut result = RetrievalResult::empty(strategy);
    for (target, origins) in &expansion.origins {
        let score = origins
            .iter()
            .map(|t| scores[t.as_str()])
            .fold(f64::NEG_INFINITY, f64::max);
        result.hits.push(EvidenceHit {
            item_id: target.clone(),
            score,
            channels: vec![Channel::Micro],
        });
        result
            .expansions
            .insert(target.clone(), origins.iter().cloned().collect());
    }
    sort_hits(&mut result.hits);
    result.unmapped_triples = expansion.unknown;
    result
}

/// Union `hits` into `result` under `channel`, keeping the best score.
pub fn merge_channel(result: &mut RetrievalResult, hits: &[Hit], channel: Channel) {
    let mut pos: BTreeMap<String, usize> = result
        .hits
        .iter()
        .enumerate()
        .map(|(i, h)| (h.item_id.clone(), i))
        .collect();
    for h in hits {
        match pos.get(&h.item_id) {
            Some(&i) => {
                let e = &mut result.hits[i];
                e.score = e.score.max(h.score);
                if !e.channels.contains(&channel) {
                    e.channels.push(channel);
                    e.channels.sort();
                }
            }
            None => {
                pos.insert(h.item_id.clone(), result.hits.len());
                result.hits.push(EvidenceHit {
                    item_id: h.item_id.clone(),
                    score: h.score,
                    channels: vec![channel],
                });
            }
        }
    }
    sort_hits(&mut result.hits);
}

fn sort_hits(hits: &mut [EvidenceHit]) {
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
}

/// Ids in a result, as a set.
pub fn id_set(result: &RetrievalResult) -> BTreeSet<String> {
    result.hits.iter().map(|h| h.item_id.clone()).collect()
}
