//! Query answering over the general and personalized knowledge.
//!
//! A personalized query decomposes the question into a reasoning path, recalls
//! matching triples from the personalized graph, follows M2 to the reasoning
//! chains those triples came from, and answers from both. Baseline strategies
//! answer from corpus retrieval alone.

mod kb;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, TextUnit};
use crate::kg::{expand_mapping, KgError, Triple};
use crate::personalize::{PersonalKg, PersonalizeError};
use crate::providers::{self, ProviderError, Providers};
use crate::retrieval::{
    rank_triples, triple_query_texts, Channel, Hit, RetrievalError, RetrievalResult, Strategy,
    TripleQuery, TripleQueryMode, DEFAULT_K,
};
use crate::store::StoreError;

pub use kb::{ExtractionNote, KnowledgeBase};

/// Default cap on evidence characters passed to answer generation.
pub const DEFAULT_EVIDENCE_BUDGET: usize = 32_000;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("personalized graph is empty; run personalize first")]
    NotPersonalized,
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error("k must be positive")]
    InvalidK,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Retrieval(RetrievalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Personalize(#[from] PersonalizeError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<RetrievalError> for EngineError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Provider(p) => EngineError::Provider(p),
            RetrievalError::InvalidK => EngineError::InvalidK,
            other => EngineError::Retrieval(other),
        }
    }
}

impl EngineError {
    pub fn is_provider(&self) -> bool {
        matches!(self, EngineError::Provider(_))
    }
}

/// A failed query together with the steps that completed before it failed.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct QueryFailure {
    #[source]
    pub error: EngineError,
    pub trace: Vec<TraceEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub k: usize,
    /// Evidence character cap; lowest-scored items are dropped first.
    pub evidence_budget: Option<usize>,
    /// Also pass question-level snippet hits to personalized answers.
    pub include_snippets: bool,
    pub triple_query: TripleQueryMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            k: DEFAULT_K,
            evidence_budget: Some(DEFAULT_EVIDENCE_BUDGET),
            include_snippets: false,
            triple_query: TripleQueryMode::Joined,
        }
    }
}

/// Request schema shared by the CLI and the HTTP service.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_filter: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub question: String,
    pub steps: Vec<Triple>,
    pub degraded: bool,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecalledTriple {
    pub triple_id: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceChain {
    pub chain_id: String,
    pub qa_id: String,
    pub text: String,
    pub score: f64,
    /// Recalled triples that reached this chain through M2.
    pub via: Vec<String>,
    /// Snippets the chain was generated from.
    pub context_snippet_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceText {
    pub item_id: String,
    pub text: String,
    pub score: f64,
    pub channels: Vec<Channel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "kebab-case")]
pub enum TraceEvent {
    Plan {
        steps: Vec<String>,
        degraded: bool,
    },
    RecallTriples {
        graph: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        graph_filter: Option<String>,
        query_texts: Vec<String>,
        hits: Vec<Hit>,
    },
    ExpandM2 {
        origins: BTreeMap<String, Vec<String>>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        unmapped: Vec<String>,
    },
    RecallSnippets {
        hits: Vec<Hit>,
    },
    Retrieve {
        result: RetrievalResult,
    },
    Truncate {
        budget: usize,
        dropped: Vec<String>,
    },
    Generate {
        prompt: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerBundle {
    pub question: String,
    pub strategy: Strategy,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_filter: Option<String>,
    pub answer: String,
    pub recalled_triples: Vec<RecalledTriple>,
    pub evidence_chains: Vec<EvidenceChain>,
    pub evidence_texts: Vec<EvidenceText>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<QueryPlan>,
    pub trace: Vec<TraceEvent>,
}

impl AnswerBundle {
    /// Ids counted as recalled context: evidence texts, chains and the
    /// snippets those chains were generated from.
    pub fn recalled_ids(&self) -> BTreeSet<String> {
        let mut ids: BTreeSet<String> = self.evidence_texts.iter().map(|e| e.item_id.clone()).collect();
        for c in &self.evidence_chains {
            ids.insert(c.chain_id.clone());
            ids.extend(c.context_snippet_ids.iter().cloned());
        }
        ids
    }

    /// Texts handed to answer generation, chains first.
    pub fn evidence_corpus(&self) -> Vec<&str> {
        self.evidence_chains
            .iter()
            .map(|c| c.text.as_str())
            .chain(self.evidence_texts.iter().map(|e| e.text.as_str()))
            .collect()
    }
}

/// Drop the lowest-scored items until the total text length fits `budget`.
/// Equal scores drop the larger id first. Survivors keep their order.
pub fn apply_budget(items: &[(TextUnit, f64)], budget: usize) -> (Vec<usize>, Vec<String>) {
    let mut total: usize = items.iter().map(|(u, _)| u.text.chars().count()).sum();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[a]
            .1
            .total_cmp(&items[b].1)
            .then_with(|| items[b].0.id.cmp(&items[a].0.id))
    });
    let mut dropped = BTreeSet::new();
    for i in order {
        if total <= budget {
            break;
        }
        total -= items[i].0.text.chars().count();
        dropped.insert(i);
    }
    let keep = (0..items.len()).filter(|i| !dropped.contains(i)).collect();
    let dropped_ids = dropped.iter().map(|&i| items[i].0.id.clone()).collect();
    (keep, dropped_ids)
}

/// Answers queries; stateless over its immutable knowledge.
#[derive(Clone)]
pub struct Engine {
    pub kb: Arc<KnowledgeBase>,
    pub personal: Option<Arc<PersonalKg>>,
    pub providers: Providers,
    pub config: EngineConfig,
}

impl Engine {
    pub fn new(
        kb: Arc<KnowledgeBase>,
        personal: Option<Arc<PersonalKg>>,
        providers: Providers,
        config: EngineConfig,
    ) -> Self {
        Engine {
            kb,
            personal,
            providers,
            config,
        }
    }

    /// Dispatch a request: personalized strategy (the default when a
    /// personalized layer is loaded) or a baseline strategy.
    pub fn handle(&self, req: &QueryRequest) -> Result<AnswerBundle, QueryFailure> {
        let k = req.k.unwrap_or(self.config.k);
        let strategy = req.strategy.unwrap_or(if self.personal.is_some() {
            Strategy::Personalized
        } else {
            Strategy::Integrated
        });
        match strategy {
            Strategy::Personalized => self.answer_query(&req.question, k, req.graph_filter.as_deref()),
            s => self.answer_query_baseline(&req.question, s, k),
        }
    }

    pub fn answer_query(
        &self,
        question: &str,
        k: usize,
        graph_filter: Option<&str>,
    ) -> Result<AnswerBundle, QueryFailure> {
        let mut trace = Vec::new();
        match self.personalized_inner(question, k, graph_filter, &mut trace) {
            Ok(b) => Ok(b),
            Err(error) => Err(QueryFailure { error, trace }),
        }
    }

    fn personalized_inner(
        &self,
        question: &str,
        k: usize,
        graph_filter: Option<&str>,
        trace: &mut Vec<TraceEvent>,
    ) -> Result<AnswerBundle, EngineError> {
        check_request(question, k)?;
        let personal = match &self.personal {
            Some(p) if !p.graph.is_empty() => p,
            _ => return Err(EngineError::NotPersonalized),
        };
        let p = &self.providers;

        let plan = providers::cot_decompose(p.cot.as_ref(), &p.prompts, question)?;
        trace.push(TraceEvent::Plan {
            steps: plan.steps.iter().map(Triple::render).collect(),
            degraded: plan.degraded,
        });

        // the triple query and the optional snippet query share one batch
        let mut texts = triple_query_texts(TripleQuery::Triples(&plan.steps), self.config.triple_query)?;
        let hop_count = texts.len();
        if self.config.include_snippets {
            texts.push(question.to_string());
        }
        let mut vectors = p.embedder.embed(&texts)?;
        if vectors.len() != texts.len() {
            return Err(ProviderError::Response(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                vectors.len()
            ))
            .into());
        }
        let question_vec = vectors.split_off(hop_count).pop();

        let index = &personal.triple_index;
        if index.model_id() != p.embedder.model_id() {
            return Err(RetrievalError::ModelMismatch {
                expected: p.embedder.model_id(),
                found: index.model_id().to_string(),
            }
            .into());
        }
        let hits = if index.is_empty() {
            Vec::new()
        } else {
            rank_triples(index, &vectors, k, |id| match graph_filter {
                None => true,
                Some(tag) => personal
                    .graph
                    .get(id)
                    .is_some_and(|r| r.tags.contains(tag)),
            })?
        };
        trace.push(TraceEvent::RecallTriples {
            graph: "personalized".into(),
            graph_filter: graph_filter.map(str::to_string),
            query_texts: texts[..hop_count].to_vec(),
            hits: hits.clone(),
        });
        let recalled_triples: Vec<RecalledTriple> = hits
            .iter()
            .filter_map(|h| {
                personal.graph.get(&h.item_id).map(|r| RecalledTriple {
                    triple_id: h.item_id.clone(),
                    subject: r.triple.subject.clone(),
                    relation: r.triple.relation.clone(),
                    object: r.triple.object.clone(),
                    score: h.score,
                })
            })
            .collect();

        let scores: BTreeMap<&str, f64> = hits.iter().map(|h| (h.item_id.as_str(), h.score)).collect();
        let expansion = expand_mapping(&personal.m2, hits.iter().map(|h| h.item_id.as_str()));
        trace.push(TraceEvent::ExpandM2 {
            origins: expansion
                .origins
                .iter()
                .map(|(c, ts)| (c.clone(), ts.iter().cloned().collect()))
                .collect(),
            unmapped: expansion.unknown.clone(),
        });
        let chains_by_id = personal.chain_map();
        let mut chains: Vec<EvidenceChain> = expansion
            .origins
            .iter()
            .filter_map(|(cid, origins)| {
                let chain = chains_by_id.get(cid.as_str())?;
                Some(EvidenceChain {
                    chain_id: cid.clone(),
                    qa_id: chain.qa_id.clone(),
                    text: chain.text.clone(),
                    score: origins
                        .iter()
                        .map(|t| scores[t.as_str()])
                        .fold(f64::NEG_INFINITY, f64::max),
                    via: origins.iter().cloned().collect(),
                    context_snippet_ids: chain.context_snippet_ids.clone(),
                })
            })
            .collect();
        chains.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.chain_id.cmp(&b.chain_id)));

        let mut snippets = Vec::new();
        if let Some(qv) = question_vec {
            let snippet_hits = if self.kb.macro_index.is_empty() {
                Vec::new()
            } else {
                self.kb.macro_index.top_k(&qv, k)?
            };
            trace.push(TraceEvent::RecallSnippets {
                hits: snippet_hits.clone(),
            });
            for h in snippet_hits {
                if let Some(u) = self.kb.text(&h.item_id) {
                    snippets.push(EvidenceText {
                        item_id: h.item_id,
                        text: u.text,
                        score: h.score,
                        channels: vec![Channel::Macro],
                    });
                }
            }
        }

        let (chains, snippets) = self.budget(chains, snippets, trace);
        let triples: Vec<Triple> = hits
            .iter()
            .filter_map(|h| personal.graph.get(&h.item_id).map(|r| r.triple.clone()))
            .collect();
        let units: Vec<TextUnit> = chains
            .iter()
            .map(|c| TextUnit {
                id: c.chain_id.clone(),
                text: c.text.clone(),
            })
            .chain(snippets.iter().map(|s| TextUnit {
                id: s.item_id.clone(),
                text: s.text.clone(),
            }))
            .collect();
        let answer = self.generate(question, &triples, &units, trace)?;
        Ok(AnswerBundle {
            question: question.to_string(),
            strategy: Strategy::Personalized,
            k,
            graph_filter: graph_filter.map(str::to_string),
            answer,
            recalled_triples,
            evidence_chains: chains,
            evidence_texts: snippets,
            plan: Some(QueryPlan {
                question: question.to_string(),
                steps: plan.steps,
                degraded: plan.degraded,
                raw_text: plan.raw_text,
            }),
            trace: std::mem::take(trace),
        })
    }

    /// Answer from corpus retrieval under a baseline strategy.
    pub fn answer_query_baseline(
        &self,
        question: &str,
        strategy: Strategy,
        k: usize,
    ) -> Result<AnswerBundle, QueryFailure> {
        let mut trace = Vec::new();
        let result = if strategy == Strategy::Personalized {
            return self.answer_query(question, k, None);
        } else {
            self.baseline_inner(question, strategy, k, &mut trace)
        };
        result.map_err(|error| QueryFailure { error, trace })
    }

    fn baseline_inner(
        &self,
        question: &str,
        strategy: Strategy,
        k: usize,
        trace: &mut Vec<TraceEvent>,
    ) -> Result<AnswerBundle, EngineError> {
        check_request(question, k)?;
        let result = self
            .kb
            .retriever(&self.providers, self.config.triple_query)
            .retrieve_strategy(question, strategy, k)?;
        let mut texts = Vec::new();
        for h in &result.hits {
            if let Some(u) = self.kb.text(&h.item_id) {
                texts.push(EvidenceText {
                    item_id: h.item_id.clone(),
                    text: u.text,
                    score: h.score,
                    channels: h.channels.clone(),
                });
            }
        }
        let recalled_triples: Vec<RecalledTriple> = result
            .triple_hits
            .iter()
            .filter_map(|h| {
                self.kb.graph.get(&h.item_id).map(|r| RecalledTriple {
                    triple_id: h.item_id.clone(),
                    subject: r.triple.subject.clone(),
                    relation: r.triple.relation.clone(),
                    object: r.triple.object.clone(),
                    score: h.score,
                })
            })
            .collect();
        if strategy != Strategy::None {
            trace.push(TraceEvent::Retrieve { result });
        }
        let (_, texts) = self.budget(Vec::new(), texts, trace);
        let triples: Vec<Triple> = if strategy.uses_graph() {
            recalled_triples
                .iter()
                .filter_map(|t| self.kb.graph.get(&t.triple_id).map(|r| r.triple.clone()))
                .collect()
        } else {
            Vec::new()
        };
        let units: Vec<TextUnit> = texts
            .iter()
            .map(|t| TextUnit {
                id: t.item_id.clone(),
                text: t.text.clone(),
            })
            .collect();
        let answer = self.generate(question, &triples, &units, trace)?;
        Ok(AnswerBundle {
            question: question.to_string(),
            strategy,
            k,
            graph_filter: None,
            answer,
            recalled_triples,
            evidence_chains: Vec::new(),
            evidence_texts: texts,
            plan: None,
            trace: std::mem::take(trace),
        })
    }

    fn budget(
        &self,
        chains: Vec<EvidenceChain>,
        texts: Vec<EvidenceText>,
        trace: &mut Vec<TraceEvent>,
    ) -> (Vec<EvidenceChain>, Vec<EvidenceText>) {
        let Some(budget) = self.config.evidence_budget else {
            return (chains, texts);
        };
        let items: Vec<(TextUnit, f64)> = chains
            .iter()
            .map(|c| (TextUnit { id: c.chain_id.clone(), text: c.text.clone() }, c.score))
            .chain(texts.iter().map(|t| (TextUnit { id: t.item_id.clone(), text: t.text.clone() }, t.score)))
            .collect();
        let (keep, dropped) = apply_budget(&items, budget);
        if dropped.is_empty() {
            return (chains, texts);
        }
        trace.push(TraceEvent::Truncate { budget, dropped });
        let keep: BTreeSet<usize> = keep.into_iter().collect();
        let n = chains.len();
        let chains = chains
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, c)| c)
            .collect();
        let texts = texts
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(&(i + n)))
            .map(|(_, t)| t)
            .collect();
        (chains, texts)
    }

    fn generate(
        &self,
        question: &str,
        triples: &[Triple],
        units: &[TextUnit],
        trace: &mut Vec<TraceEvent>,
    ) -> Result<String, EngineError> {
        let p = &self.providers;
        trace.push(TraceEvent::Generate {
            prompt: providers::answer_prompt(&p.prompts, question, triples, units),
        });
        Ok(providers::generate_answer(p.generator.as_ref(), &p.prompts, question, triples, units)?)
    }
}

fn check_request(question: &str, k: usize) -> Result<(), EngineError> {
    if question.trim().is_empty() {
        return Err(EngineError::EmptyQuestion);
    }
    if k == 0 {
        return Err(EngineError::InvalidK);
    }
    Ok(())
}
