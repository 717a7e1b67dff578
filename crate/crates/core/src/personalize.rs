//! Personalized knowledge graph construction from worked question/answer cases.
//!
//! Per training pair:
//!
//! 1. decompose the pair into query triples (`G_query`);
//! 2. recall general triples for them and follow M1 to their snippets (`D_tuple`);
//! 3. recall the top-k snippets for the question itself (`D_snippets`);
//! 4. generate the reasoning text over `D_snippets` then `D_tuple`;
//! 5. extract triples from the reasoning text and link each to its chain in M2.
//!
//! Pairs are processed concurrently and committed in input order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Corpus, TextUnit};
use crate::ids::content_id;
use crate::kg::{
    add_triples, expand_mapping, merge_graphs, GraphKind, KgError, KnowledgeGraph, MappingName,
    MappingTable, Triple,
};
use crate::providers::parse::{parse_reasoning_path, serialize_path};
use crate::providers::{self, ProviderError, Providers};
use crate::retrieval::{
    build_triple_index, Hit, RetrievalError, Retriever, TripleQuery, TripleQueryMode, VectorIndex,
    DEFAULT_K,
};
use crate::store::{self, Manifest, StoreError};

const MANIFEST_KIND: &str = "personal-kg";
const SFT_MANIFEST_KIND: &str = "sft";
const GRAPH_FILE: &str = "graph.jsonl";
const ADDITIONS_FILE: &str = "additions.jsonl";
const M2_FILE: &str = "m2.jsonl";
const CHAINS_FILE: &str = "chains.jsonl";
const TRACES_FILE: &str = "traces.jsonl";
const REPORT_FILE: &str = "report.jsonl";
const INDEX_FILE: &str = "triples.kgvi";
pub const SFT_FILE: &str = "sft.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum PersonalizeError {
    #[error("training set is empty")]
    EmptyTraining,
    #[error("general knowledge graph is empty; run build-kg first")]
    MissingGeneral,
    #[error("training line {line}: {message}")]
    InvalidPair { line: usize, message: String },
    #[error("duplicate qa_id `{0}`")]
    DuplicateQa(String),
    #[error("no reasoning chains to export")]
    NoChains,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub qa_id: String,
    pub question: String,
    pub gold_answer: String,
    pub dataset_tag: String,
}

impl QAPair {
    fn check(&self) -> Result<(), String> {
        for (name, value) in [
            ("qa_id", &self.qa_id),
            ("question", &self.question),
            ("gold_answer", &self.gold_answer),
            ("dataset_tag", &self.dataset_tag),
        ] {
            if value.trim().is_empty() {
                return Err(format!("{name} must not be empty"));
            }
        }
        Ok(())
    }
}

/// Read line-delimited training pairs.
pub fn read_training<R: BufRead>(reader: R) -> Result<Vec<QAPair>, PersonalizeError> {
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| PersonalizeError::InvalidPair {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: QAPair = serde_json::from_str(&line).map_err(|e| PersonalizeError::InvalidPair {
            line: line_no,
            message: e.to_string(),
        })?;
        pair.check()
            .map_err(|message| PersonalizeError::InvalidPair { line: line_no, message })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub chain_id: String,
    pub qa_id: String,
    pub question: String,
    pub dataset_tag: String,
    pub text: String,
    pub context_snippet_ids: Vec<String>,
    pub decomposition: Vec<Triple>,
}

pub fn chain_id(qa_id: &str, text: &str) -> String {
    content_id("c", &json!({ "qa_id": qa_id, "text": text }))
}

/// Every intermediate of one pair's run, kept for audit and testing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTrace {
    pub qa_id: String,
    pub g_query: Vec<Triple>,
    pub g_recall: Vec<Hit>,
    pub d_tuple: Vec<String>,
    pub d_snippets: Vec<Hit>,
    /// Context ids in prompt order.
    pub contexts: Vec<String>,
    pub chain_id: String,
    /// Extracted triples in extraction order, deduplicated.
    pub additions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairStatus {
    Ok,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportLine {
    pub qa_id: String,
    pub status: PairStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub lines: Vec<ReportLine>,
    pub new_triples: usize,
    pub m2_links: usize,
}

impl RunReport {
    pub fn skipped(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter(|l| l.status == PairStatus::Skipped)
            .map(|l| l.qa_id.as_str())
            .collect()
    }

    pub fn processed(&self) -> usize {
        self.lines.iter().filter(|l| l.status == PairStatus::Ok).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonalizeOptions {
    /// Triples recalled per decomposition.
    pub k_triples: usize,
    /// Snippets recalled per question.
    pub k_snippets: usize,
    pub triple_query: TripleQueryMode,
}

impl Default for PersonalizeOptions {
    fn default() -> Self {
        PersonalizeOptions {
            k_triples: DEFAULT_K,
            k_snippets: DEFAULT_K,
            triple_query: TripleQueryMode::Joined,
        }
    }
}

impl PersonalizeOptions {
    pub fn with_k(k: usize) -> Self {
        PersonalizeOptions {
            k_triples: k,
            k_snippets: k,
            ..Default::default()
        }
    }
}

/// The general knowledge the pipeline reads from.
#[derive(Clone, Copy)]
pub struct GeneralKnowledge<'a> {
    pub corpus: &'a Corpus,
    pub graph: &'a KnowledgeGraph,
    pub m1: &'a MappingTable,
    pub triple_index: &'a VectorIndex,
    pub macro_index: &'a VectorIndex,
}

/// Personalized layer: merged graph, additions, M2, chains and their index.
#[derive(Debug, Clone)]
pub struct PersonalKg {
    pub graph: KnowledgeGraph,
    pub additions: KnowledgeGraph,
    pub m2: MappingTable,
    pub chains: Vec<ReasoningChain>,
    pub traces: Vec<PairTrace>,
    pub report: RunReport,
    pub triple_index: VectorIndex,
}

struct PairOutcome {
    chain: ReasoningChain,
    trace: PairTrace,
    triples: Vec<Triple>,
}

#[derive(Debug, thiserror::Error)]
enum PairError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Context units for the reasoning prompt: `D_snippets` in score order, then
/// the remaining `D_tuple` ids in id order.
pub fn assemble_contexts(d_snippets: &[Hit], d_tuple: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for id in d_snippets.iter().map(|h| &h.item_id).chain(d_tuple.iter()) {
        if seen.insert(id.as_str()) {
            out.push(id.clone());
        }
    }
    out
}

fn run_pair(
    pair: &QAPair,
    general: &GeneralKnowledge<'_>,
    providers: &Providers,
    opts: &PersonalizeOptions,
) -> Result<PairOutcome, PairError> {
    let prompts = providers.prompts.as_ref();
    let retriever = Retriever {
        embedder: providers.embedder.as_ref(),
        macro_index: Some(general.macro_index),
        fixed_index: None,
        triple_index: Some(general.triple_index),
        m1: Some(general.m1),
        triple_query: opts.triple_query,
    };
    let mut diagnostics = Vec::new();

    let decomposition = providers::decompose_qa(
        providers.decomposer.as_ref(),
        prompts,
        &pair.question,
        &pair.gold_answer,
    )?;
    diagnostics.extend(decomposition.diagnostics.iter().map(|d| format!("decompose: {d}")));
    let g_query = decomposition.triples;

    let g_recall = if g_query.is_empty() {
        Vec::new()
    } else {
        retriever.retrieve_triples(TripleQuery::Triples(&g_query), opts.k_triples)?
    };
    let d_tuple = expand_mapping(general.m1, g_recall.iter().map(|h| h.item_id.as_str())).targets;

    let d_snippets = retriever.retrieve_snippets(&pair.question, opts.k_snippets)?;

    let mut contexts = Vec::new();
    let mut context_ids = Vec::new();
    for id in assemble_contexts(&d_snippets, &d_tuple) {
        match general.corpus.snippet(&id) {
            Some(s) => {
                contexts.push(TextUnit {
                    id: id.clone(),
                    text: s.render(),
                });
                context_ids.push(id);
            }
            None => diagnostics.push(format!("context {id} is not in the corpus; dropped")),
        }
    }
    let text = providers::generate_reasoning(
        providers.generator.as_ref(),
        prompts,
        &pair.question,
        &pair.gold_answer,
        &contexts,
    )?;

    let extraction = providers::extract_triples(providers.extractor.as_ref(), prompts, &text)?;
    diagnostics.extend(extraction.diagnostics.iter().map(|d| format!("extract: {d}")));
    let mut seen = BTreeSet::new();
    let triples: Vec<Triple> = extraction
        .triples
        .into_iter()
        .filter(|t| seen.insert(t.triple_id.clone()))
        .collect();

    let chain = ReasoningChain {
        chain_id: chain_id(&pair.qa_id, &text),
        qa_id: pair.qa_id.clone(),
        question: pair.question.clone(),
        dataset_tag: pair.dataset_tag.clone(),
        text,
        context_snippet_ids: context_ids.clone(),
        decomposition: g_query.clone(),
    };
    let trace = PairTrace {
        qa_id: pair.qa_id.clone(),
        g_query,
        g_recall,
        d_tuple,
        d_snippets,
        contexts: context_ids,
        chain_id: chain.chain_id.clone(),
        additions: triples.iter().map(|t| t.triple_id.clone()).collect(),
        diagnostics,
    };
    Ok(PairOutcome {
        chain,
        trace,
        triples,
    })
}

/// Run the five-step pipeline over `training` and merge the result into the
/// general graph.
///
/// A pair whose provider calls fail is skipped and listed in the report.
pub fn build_personal_kg(
    training: &[QAPair],
    general: GeneralKnowledge<'_>,
    providers: &Providers,
    opts: PersonalizeOptions,
) -> Result<PersonalKg, PersonalizeError> {
    if training.is_empty() {
        return Err(PersonalizeError::EmptyTraining);
    }
    if general.graph.is_empty() {
        return Err(PersonalizeError::MissingGeneral);
    }
    if opts.k_triples == 0 || opts.k_snippets == 0 {
        return Err(RetrievalError::InvalidK.into());
    }
    let mut ids = BTreeSet::new();
    for p in training {
        p.check().map_err(|message| PersonalizeError::InvalidPair { line: 0, message })?;
        if !ids.insert(p.qa_id.as_str()) {
            return Err(PersonalizeError::DuplicateQa(p.qa_id.clone()));
        }
    }
    let model = providers.embedder.model_id();
    for idx in [general.triple_index, general.macro_index] {
        if idx.model_id() != model {
            return Err(RetrievalError::ModelMismatch {
                expected: model,
                found: idx.model_id().to_string(),
            }
            .into());
        }
    }

    let outcomes: Vec<Result<PairOutcome, PairError>> = training
        .par_iter()
        .map(|p| run_pair(p, &general, providers, &opts))
        .collect();

    let mut additions = KnowledgeGraph::new(GraphKind::Personalized);
    let mut m2 = MappingTable::new(MappingName::M2);
    let mut chains = Vec::new();
    let mut traces = Vec::new();
    let mut report = RunReport::default();
    for (pair, outcome) in training.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                let chain_id = o.chain.chain_id.clone();
                let linked: Vec<(Triple, String)> =
                    o.triples.into_iter().map(|t| (t, chain_id.clone())).collect();
                let summary = add_triples(
                    &mut additions,
                    &linked,
                    &mut m2,
                    |s| s == chain_id,
                    Some(&pair.dataset_tag),
                )?;
                report.new_triples += summary.new_triples;
                report.m2_links += summary.links;
                report.lines.push(ReportLine {
                    qa_id: pair.qa_id.clone(),
                    status: PairStatus::Ok,
                    error: None,
                    diagnostics: o.trace.diagnostics.clone(),
                });
                chains.push(o.chain);
                traces.push(o.trace);
            }
            Err(e) => {
                tracing::warn!(qa_id = %pair.qa_id, error = %e, "skipping training pair");
                report.lines.push(ReportLine {
                    qa_id: pair.qa_id.clone(),
                    status: PairStatus::Skipped,
                    error: Some(e.to_string()),
                    diagnostics: Vec::new(),
                });
            }
        }
    }
    let graph = merge_graphs(general.graph, &additions);
    let triple_index = build_triple_index(providers.embedder.as_ref(), &graph)?;
    tracing::info!(
        chains = chains.len(),
        skipped = report.skipped().len(),
        new_triples = report.new_triples,
        "personalized graph built"
    );
    Ok(PersonalKg {
        graph,
        additions,
        m2,
        chains,
        traces,
        report,
        triple_index,
    })
}

fn kg_store(e: KgError) -> StoreError {
    match e {
        KgError::Store(s) => s,
        other => StoreError::Invalid(other.to_string()),
    }
}

impl PersonalKg {
    pub fn chain(&self, chain_id: &str) -> Option<&ReasoningChain> {
        self.chains.iter().find(|c| c.chain_id == chain_id)
    }

    pub fn chain_map(&self) -> BTreeMap<&str, &ReasoningChain> {
        self.chains.iter().map(|c| (c.chain_id.as_str(), c)).collect()
    }

    /// Atomically write the layer to `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), PersonalizeError> {
        store::replace_dir(dir, |d| {
            self.graph.save(&d.join(GRAPH_FILE)).map_err(kg_store)?;
            self.additions.save(&d.join(ADDITIONS_FILE)).map_err(kg_store)?;
            self.m2.save(&d.join(M2_FILE)).map_err(kg_store)?;
            store::write_jsonl(&d.join(CHAINS_FILE), &self.chains)?;
            store::write_jsonl(&d.join(TRACES_FILE), &self.traces)?;
            store::write_jsonl(&d.join(REPORT_FILE), &self.report.lines)?;
            self.triple_index.save(&d.join(INDEX_FILE))?;
            Manifest::new(MANIFEST_KIND)
                .count("triples", self.graph.len())
                .count("additions", self.additions.len())
                .count("chains", self.chains.len())
                .count("m2_links", self.m2.link_count())
                .count("skipped", self.report.skipped().len())
                .meta("new_triples", self.report.new_triples)
                .meta("embedding_model", self.triple_index.model_id())
                .meta("dims", self.triple_index.dims())
                .write(d)
        })?;
        Ok(())
    }

    pub fn load(
        dir: &Path,
        embedding_model: &str,
        dims: Option<usize>,
    ) -> Result<Self, PersonalizeError> {
        let manifest = Manifest::read(dir, MANIFEST_KIND)?;
        let graph = KnowledgeGraph::load(&dir.join(GRAPH_FILE), GraphKind::Personalized)?;
        let additions = KnowledgeGraph::load(&dir.join(ADDITIONS_FILE), GraphKind::Personalized)?;
        let m2 = MappingTable::load(&dir.join(M2_FILE), MappingName::M2)?;
        let chains: Vec<ReasoningChain> = store::read_jsonl(&dir.join(CHAINS_FILE))?;
        let traces: Vec<PairTrace> = store::read_jsonl(&dir.join(TRACES_FILE))?;
        let lines: Vec<ReportLine> = store::read_jsonl(&dir.join(REPORT_FILE))?;
        let triple_index = VectorIndex::load(&dir.join(INDEX_FILE), embedding_model, dims)?;
        if manifest.counts.get("chains").copied() != Some(chains.len() as u64) {
            return Err(StoreError::Invalid("chain count disagrees with manifest".into()).into());
        }
        let new_triples = manifest
            .meta
            .get("new_triples")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as usize;
        Ok(PersonalKg {
            graph,
            additions,
            report: RunReport {
                lines,
                new_triples,
                m2_links: m2.link_count(),
            },
            m2,
            chains,
            traces,
            triple_index,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SftKind {
    QaWithChain,
    TripleDecomposition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub kind: SftKind,
    pub input: String,
    pub target: String,
}

impl SftRecord {
    /// The decomposition triples of a `triple-decomposition` record.
    pub fn decomposition(&self) -> Option<Vec<Triple>> {
        match self.kind {
            SftKind::TripleDecomposition => Some(parse_reasoning_path(&self.target).triples),
            SftKind::QaWithChain => None,
        }
    }
}

/// Two supervision records per chain: question to reasoning text, and
/// question to its decomposition triples.
pub fn export_sft(chains: &[ReasoningChain]) -> Result<Vec<SftRecord>, PersonalizeError> {
    if chains.is_empty() {
        return Err(PersonalizeError::NoChains);
    }
    Ok(chains
        .iter()
        .flat_map(|c| {
            [
                SftRecord {
                    kind: SftKind::QaWithChain,
                    input: c.question.clone(),
                    target: c.text.clone(),
                },
                SftRecord {
                    kind: SftKind::TripleDecomposition,
                    input: c.question.clone(),
                    target: serialize_path(&c.decomposition),
                },
            ]
        })
        .collect())
}

pub fn write_sft(dir: &Path, records: &[SftRecord]) -> Result<(), PersonalizeError> {
    store::replace_dir(dir, |d| {
        store::write_jsonl(&d.join(SFT_FILE), records)?;
        Manifest::new(SFT_MANIFEST_KIND)
            .count("records", records.len())
            .write(d)
    })?;
    Ok(())
}

pub fn read_sft(dir: &Path) -> Result<Vec<SftRecord>, PersonalizeError> {
    let manifest = Manifest::read(dir, SFT_MANIFEST_KIND)?;
    let records: Vec<SftRecord> = store::read_jsonl(&dir.join(SFT_FILE))?;
    if manifest.counts.get("records").copied() != Some(records.len() as u64) {
        return Err(StoreError::Invalid("record count disagrees with manifest".into()).into());
    }
    Ok(records)
}
