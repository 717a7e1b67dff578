//! Benchmark runner and metric suite.
//!
//! Accuracy, answer similarity and the context metrics are deterministic and
//! set-based; absolute values are not comparable to LLM-judged scores.

mod metrics;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{AnswerBundle, Engine, QueryRequest};
use crate::providers::{Embedder, ProviderError};
use crate::retrieval::{RetrievalError, Strategy};
use crate::store::{self, Manifest, StoreError};

pub use metrics::{
    accuracy, answer_similarity, compare_scores, context_metrics, judge_triples, normalize_to_candidate,
    sign_test, ContextMetrics, JudgeItem, JudgeReport, JudgeScore, PairedComparison,
};

const MANIFEST_KIND: &str = "eval";
const ROWS_FILE: &str = "rows.jsonl";
const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.md";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{predictions} predictions but {golds} gold answers")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("dataset line {line}: {message}")]
    InvalidItem { line: usize, message: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub qa_id: String,
    pub question: String,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_context_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_entities: Option<Vec<String>>,
}

impl EvalItem {
    fn check(&self) -> Result<(), String> {
        if self.qa_id.trim().is_empty() || self.question.trim().is_empty() {
            return Err("qa_id and question must not be empty".into());
        }
        if self.gold_answer.trim().is_empty() {
            return Err("gold_answer must not be empty".into());
        }
        if let Some(c) = &self.candidates {
            if !c.iter().any(|c| c.trim() == self.gold_answer.trim()) {
                return Err("gold_answer is not among the candidates".into());
            }
        }
        Ok(())
    }
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<EvalItem>, EvalError> {
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let bad = |message: String| EvalError::InvalidItem {
            line: idx + 1,
            message,
        };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        item.check().map_err(bad)?;
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub qa_id: String,
    /// Candidate-normalized when the item has candidates.
    pub prediction: String,
    pub raw_answer: String,
    pub gold_answer: String,
    pub correct: bool,
    pub answer_similarity: Option<f64>,
    pub context_precision: Option<f64>,
    pub context_recall: Option<f64>,
    pub context_entity_recall: Option<f64>,
    pub recalled_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub items: usize,
    pub failures: usize,
    pub accuracy: f64,
    pub answer_similarity: Option<f64>,
    pub context_precision: Option<f64>,
    pub context_recall: Option<f64>,
    pub context_entity_recall: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Aggregates {
    pub fn from_rows(rows: &[EvalRow]) -> Self {
        let n = rows.len();
        let correct = rows.iter().filter(|r| r.correct).count();
        Aggregates {
            items: n,
            failures: rows.iter().filter(|r| r.error.is_some()).count(),
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            answer_similarity: mean(rows.iter().map(|r| r.answer_similarity)),
            context_precision: mean(rows.iter().map(|r| r.context_precision)),
            context_recall: mean(rows.iter().map(|r| r.context_recall)),
            context_entity_recall: mean(rows.iter().map(|r| r.context_entity_recall)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_tag: String,
    pub strategy: Strategy,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_filter: Option<String>,
    pub config: serde_json::Value,
    pub aggregates: Aggregates,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    pub dataset_tag: String,
    pub strategy: Strategy,
    pub k: usize,
    pub graph_filter: Option<String>,
}

/// Recalled ids credited for context metrics.
///
/// A fixed segment is credited with the snippets it contains in full; a
/// segment containing none counts as itself.
pub fn credited_ids(engine: &Engine, bundle: &AnswerBundle) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for id in bundle.recalled_ids() {
        match engine.kb.fixed_segment(&id) {
            Some(seg) if !seg.covers.is_empty() => out.extend(seg.covers.iter().cloned()),
            _ => {
                out.insert(id);
            }
        }
    }
    out
}

fn evaluate_item(
    engine: &Engine,
    item: &EvalItem,
    opts: &BenchmarkOptions,
    metric_embedder: &dyn Embedder,
) -> EvalRow {
    let request = QueryRequest {
        question: item.question.clone(),
        k: Some(opts.k),
        strategy: Some(opts.strategy),
        graph_filter: opts.graph_filter.clone(),
    };
    let failed = |error: String| EvalRow {
        qa_id: item.qa_id.clone(),
        prediction: String::new(),
        raw_answer: String::new(),
        gold_answer: item.gold_answer.clone(),
        correct: false,
        answer_similarity: None,
        context_precision: None,
        context_recall: None,
        context_entity_recall: None,
        recalled_ids: Vec::new(),
        error: Some(error),
    };
    let bundle = match engine.handle(&request) {
        Ok(b) => b,
        Err(e) => {
            tracing::warn!(qa_id = %item.qa_id, error = %e, "benchmark item failed");
            return failed(e.to_string());
        }
    };
    let mut notes = Vec::new();
    let prediction = match &item.candidates {
        Some(c) => match normalize_to_candidate(metric_embedder, &bundle.answer, c) {
            Ok(p) => p,
            Err(e) => {
                notes.push(format!("candidate normalization: {e}"));
                bundle.answer.clone()
            }
        },
        None => bundle.answer.clone(),
    };
    let similarity = match answer_similarity(metric_embedder, &bundle.answer, &item.gold_answer) {
        Ok(s) => Some(s),
        Err(e) => {
            notes.push(format!("answer similarity: {e}"));
            None
        }
    };
    let recalled = credited_ids(engine, &bundle);
    let gold: BTreeSet<String> = item.gold_context_ids.iter().flatten().cloned().collect();
    let entities: Vec<&str> = item.gold_entities.iter().flatten().map(String::as_str).collect();
    let texts = bundle.evidence_corpus();
    let m = context_metrics(&recalled, &gold, &entities, &texts);
    EvalRow {
        qa_id: item.qa_id.clone(),
        correct: prediction.trim() == item.gold_answer.trim(),
        prediction,
        raw_answer: bundle.answer,
        gold_answer: item.gold_answer.clone(),
        answer_similarity: similarity,
        context_precision: m.precision,
        context_recall: m.recall,
        context_entity_recall: m.entity_recall,
        recalled_ids: recalled.into_iter().collect(),
        error: (!notes.is_empty()).then(|| notes.join("; ")),
    }
}

/// Answer every item under one strategy and score the results.
///
/// Items run concurrently; rows are ordered by qa_id. A failing item is
/// recorded as incorrect with its error and the run continues.
pub fn run_benchmark(
    engine: &Engine,
    dataset: &[EvalItem],
    opts: &BenchmarkOptions,
    metric_embedder: &dyn Embedder,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::Empty("dataset"));
    }
    if opts.k == 0 {
        return Err(RetrievalError::InvalidK.into());
    }
    let mut rows: Vec<EvalRow> = dataset
        .par_iter()
        .map(|item| evaluate_item(engine, item, opts, metric_embedder))
        .collect();
    rows.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
    let config = serde_json::json!({
        "engine": engine.config,
        "embedding_model": engine.providers.embedder.model_id(),
        "generation_model": engine.providers.generator.model_id(),
        "cot_model": engine.providers.cot.model_id(),
        "metric_embedding_model": metric_embedder.model_id(),
        "prompt_version": engine.providers.prompts.version,
    });
    Ok(EvalReport {
        dataset_tag: opts.dataset_tag.clone(),
        strategy: opts.strategy,
        k: opts.k,
        graph_filter: opts.graph_filter.clone(),
        config,
        aggregates: Aggregates::from_rows(&rows),
        rows,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "\\".to_string(), |x| format!("{x:.3}"))
}

/// Markdown table, one row per report, in the usual RAG column order.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str("| Strategy | Accuracy | Answer Similarity | Context Precision | Context Recall | Context Entity Recall |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in reports {
        let a = &r.aggregates;
        writeln!(
            out,
            "| {} | {:.3} | {} | {} | {} | {} |",
            r.strategy,
            a.accuracy,
            cell(a.answer_similarity),
            cell(a.context_precision),
            cell(a.context_recall),
            cell(a.context_entity_recall)
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportHead {
    dataset_tag: String,
    strategy: Strategy,
    k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph_filter: Option<String>,
    config: serde_json::Value,
    aggregates: Aggregates,
}

/// Write reports to `dir`: one subdirectory per strategy plus a shared summary.
pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<(), EvalError> {
    store::replace_dir(dir, |d| {
        let mut manifest = Manifest::new(MANIFEST_KIND);
        let mut order = Vec::new();
        for r in reports {
            let sub = d.join(r.strategy.as_str());
            std::fs::create_dir_all(&sub).map_err(|e| StoreError::io(&sub, e))?;
            store::write_jsonl(&sub.join(ROWS_FILE), &r.rows)?;
            let head = ReportHead {
                dataset_tag: r.dataset_tag.clone(),
                strategy: r.strategy,
                k: r.k,
                graph_filter: r.graph_filter.clone(),
                config: r.config.clone(),
                aggregates: r.aggregates.clone(),
            };
            let mut bytes = serde_json::to_vec_pretty(&head).expect("report serializes");
            bytes.push(b'\n');
            store::write_atomic(&sub.join(REPORT_FILE), &bytes)?;
            manifest = manifest.count(r.strategy.as_str(), r.rows.len());
            order.push(r.strategy.as_str());
        }
        store::write_atomic(&d.join(SUMMARY_FILE), summary_table(reports).as_bytes())?;
        manifest.meta("strategies", order).write(d)
    })?;
    Ok(())
}

pub fn read_reports(dir: &Path) -> Result<Vec<EvalReport>, EvalError> {
    let manifest = Manifest::read(dir, MANIFEST_KIND)?;
    let order: Vec<String> = manifest
        .meta
        .get("strategies")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| StoreError::Invalid("eval manifest lacks strategies".into()))?;
    let mut out = Vec::new();
    for s in order {
        let sub = dir.join(&s);
        let bytes = std::fs::read(sub.join(REPORT_FILE)).map_err(|e| StoreError::io(&sub, e))?;
        let head: ReportHead = serde_json::from_slice(&bytes).map_err(|e| StoreError::Invalid(e.to_string()))?;
        let rows: Vec<EvalRow> = store::read_jsonl(&sub.join(ROWS_FILE))?;
        out.push(EvalReport {
            dataset_tag: head.dataset_tag,
            strategy: head.strategy,
            k: head.k,
            graph_filter: head.graph_filter,
            config: head.config,
            aggregates: head.aggregates,
            rows,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
