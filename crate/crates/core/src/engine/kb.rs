use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{macro_snippets, segment_fixed_with_sources, Corpus, FixedSegment, TextUnit};
use crate::kg::{add_triples, GraphKind, KgError, KnowledgeGraph, MappingName, MappingTable};
use crate::personalize::GeneralKnowledge;
use crate::providers::{self, Providers};
use crate::retrieval::{
    build_index, build_triple_index, ItemKind, Retriever, TripleQueryMode, VectorIndex,
};
use crate::store::{self, Manifest, StoreError};

use super::EngineError;

const MANIFEST_KIND: &str = "general-kg";
const GRAPH_FILE: &str = "graph.jsonl";
const M1_FILE: &str = "m1.jsonl";
const FIXED_FILE: &str = "fixed.jsonl";
const REPORT_FILE: &str = "report.jsonl";
const MACRO_INDEX: &str = "macro.kgvi";
const FIXED_INDEX: &str = "fixed.kgvi";
const TRIPLE_INDEX: &str = "triples.kgvi";

/// A snippet whose extraction failed or produced diagnostics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionNote {
    pub snippet_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// The general knowledge base: corpus, triple graph, M1 and the three indexes.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub corpus: Corpus,
    pub graph: KnowledgeGraph,
    pub m1: MappingTable,
    pub fixed: Vec<FixedSegment>,
    pub macro_index: VectorIndex,
    pub fixed_index: VectorIndex,
    pub triple_index: VectorIndex,
    pub segment_len: usize,
    pub notes: Vec<ExtractionNote>,
    fixed_pos: BTreeMap<String, usize>,
}

impl KnowledgeBase {
    /// Extract triples from every snippet and build all indexes.
    ///
    /// Snippets whose extraction call fails are skipped and noted.
    pub fn build(corpus: Corpus, providers: &Providers, segment_len: usize) -> Result<Self, EngineError> {
        let results: Vec<_> = corpus
            .snippets()
            .par_iter()
            .map(|s| {
                providers::extract_triples(providers.extractor.as_ref(), &providers.prompts, &s.text)
            })
            .collect();
        let mut graph = KnowledgeGraph::new(GraphKind::General);
        let mut m1 = MappingTable::new(MappingName::M1);
        let mut notes = Vec::new();
        for (s, result) in corpus.snippets().iter().zip(results) {
            match result {
                Ok(ex) => {
                    if !ex.diagnostics.is_empty() {
                        notes.push(ExtractionNote {
                            snippet_id: s.snippet_id.clone(),
                            error: None,
                            diagnostics: ex.diagnostics,
                        });
                    }
                    let linked: Vec<_> = ex
                        .triples
                        .into_iter()
                        .map(|t| (t, s.snippet_id.clone()))
                        .collect();
                    add_triples(&mut graph, &linked, &mut m1, |id| corpus.contains_snippet(id), None)?;
                }
                Err(e) => {
                    tracing::warn!(snippet = %s.snippet_id, error = %e, "extraction failed; snippet skipped");
                    notes.push(ExtractionNote {
                        snippet_id: s.snippet_id.clone(),
                        error: Some(e.to_string()),
                        diagnostics: Vec::new(),
                    });
                }
            }
        }
        let fixed = segment_fixed_with_sources(&corpus, segment_len)?;
        let embedder = providers.embedder.as_ref();
        let macro_index = build_index(ItemKind::Snippet, embedder, &macro_snippets(&corpus))?;
        let fixed_units: Vec<TextUnit> = fixed
            .iter()
            .map(|f| TextUnit {
                id: f.snippet.snippet_id.clone(),
                text: f.snippet.text.clone(),
            })
            .collect();
        let fixed_index = build_index(ItemKind::Snippet, embedder, &fixed_units)?;
        let triple_index = build_triple_index(embedder, &graph)?;
        tracing::info!(
            snippets = corpus.snippets().len(),
            triples = graph.len(),
            links = m1.link_count(),
            "general knowledge graph built"
        );
        Ok(KnowledgeBase::from_parts(
            corpus,
            graph,
            m1,
            fixed,
            macro_index,
            fixed_index,
            triple_index,
            segment_len,
            notes,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        corpus: Corpus,
        graph: KnowledgeGraph,
        m1: MappingTable,
        fixed: Vec<FixedSegment>,
        macro_index: VectorIndex,
        fixed_index: VectorIndex,
        triple_index: VectorIndex,
        segment_len: usize,
        notes: Vec<ExtractionNote>,
    ) -> Self {
        let fixed_pos = fixed
            .iter()
            .enumerate()
            .map(|(i, f)| (f.snippet.snippet_id.clone(), i))
            .collect();
        KnowledgeBase {
            corpus,
            graph,
            m1,
            fixed,
            macro_index,
            fixed_index,
            triple_index,
            segment_len,
            notes,
            fixed_pos,
        }
    }

    pub fn general(&self) -> GeneralKnowledge<'_> {
        GeneralKnowledge {
            corpus: &self.corpus,
            graph: &self.graph,
            m1: &self.m1,
            triple_index: &self.triple_index,
            macro_index: &self.macro_index,
        }
    }

    pub fn retriever<'a>(&'a self, providers: &'a Providers, mode: TripleQueryMode) -> Retriever<'a> {
        Retriever {
            embedder: providers.embedder.as_ref(),
            macro_index: Some(&self.macro_index),
            fixed_index: Some(&self.fixed_index),
            triple_index: Some(&self.triple_index),
            m1: Some(&self.m1),
            triple_query: mode,
        }
    }

    pub fn fixed_segment(&self, id: &str) -> Option<&FixedSegment> {
        self.fixed_pos.get(id).map(|&i| &self.fixed[i])
    }

    /// Prompt text for a snippet (title-rendered) or a fixed segment (raw).
    pub fn text(&self, id: &str) -> Option<TextUnit> {
        if let Some(s) = self.corpus.snippet(id) {
            return Some(TextUnit {
                id: id.to_string(),
                text: s.render(),
            });
        }
        self.fixed_segment(id).map(|f| TextUnit {
            id: id.to_string(),
            text: f.snippet.text.clone(),
        })
    }

    /// Atomically write the graph, M1, fixed segments and indexes to `dir`.
    /// The corpus is stored separately.
    pub fn save(&self, dir: &Path) -> Result<(), EngineError> {
        let kg = |e: KgError| match e {
            KgError::Store(s) => s,
            other => StoreError::Invalid(other.to_string()),
        };
        store::replace_dir(dir, |d| {
            self.graph.save(&d.join(GRAPH_FILE)).map_err(kg)?;
            self.m1.save(&d.join(M1_FILE)).map_err(kg)?;
            store::write_jsonl(&d.join(FIXED_FILE), &self.fixed)?;
            store::write_jsonl(&d.join(REPORT_FILE), &self.notes)?;
            self.macro_index.save(&d.join(MACRO_INDEX))?;
            self.fixed_index.save(&d.join(FIXED_INDEX))?;
            self.triple_index.save(&d.join(TRIPLE_INDEX))?;
            Manifest::new(MANIFEST_KIND)
                .count("triples", self.graph.len())
                .count("m1_links", self.m1.link_count())
                .count("snippets", self.corpus.snippets().len())
                .count("fixed_segments", self.fixed.len())
                .meta("segment_len", self.segment_len)
                .meta("embedding_model", self.triple_index.model_id())
                .meta("dims", self.triple_index.dims())
                .write(d)
        })?;
        Ok(())
    }

    pub fn load(
        corpus: Corpus,
        dir: &Path,
        embedding_model: &str,
        dims: Option<usize>,
    ) -> Result<Self, EngineError> {
        let manifest = Manifest::read(dir, MANIFEST_KIND)?;
        if manifest.counts.get("snippets").copied() != Some(corpus.snippets().len() as u64) {
            return Err(StoreError::Invalid(
                "knowledge graph was built from a different corpus; rerun build-kg".into(),
            )
            .into());
        }
        let segment_len = manifest
            .meta
            .get("segment_len")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| StoreError::Invalid("manifest lacks segment_len".into()))?
            as usize;
        let graph = KnowledgeGraph::load(&dir.join(GRAPH_FILE), GraphKind::General)?;
        let m1 = MappingTable::load(&dir.join(M1_FILE), MappingName::M1)?;
        let fixed: Vec<FixedSegment> = store::read_jsonl(&dir.join(FIXED_FILE))?;
        let notes: Vec<ExtractionNote> = store::read_jsonl(&dir.join(REPORT_FILE))?;
        let macro_index = VectorIndex::load(&dir.join(MACRO_INDEX), embedding_model, dims)?;
        let fixed_index = VectorIndex::load(&dir.join(FIXED_INDEX), embedding_model, dims)?;
        let triple_index = VectorIndex::load(&dir.join(TRIPLE_INDEX), embedding_model, dims)?;
        Ok(KnowledgeBase::from_parts(
            corpus,
            graph,
            m1,
            fixed,
            macro_index,
            fixed_index,
            triple_index,
            segment_len,
            notes,
        ))
    }
}
