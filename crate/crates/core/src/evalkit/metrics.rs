use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::kg::{normalize, Triple};
use crate::providers::parse::parse_likert;
use crate::providers::{judge_score, Embedder, LanguageModel, PromptSet, ProviderError};
use crate::retrieval::cosine;

use super::EvalError;

/// Fraction of predictions equal to their gold answer (after trimming).
pub fn accuracy<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], golds: &[G]) -> Result<f64, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty("predictions"));
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref().trim() == g.as_ref().trim())
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Map a free-text prediction onto one of `candidates`: exact match first,
/// otherwise the candidate with the most similar embedding (earliest wins ties).
pub fn normalize_to_candidate(
    embedder: &dyn Embedder,
    prediction: &str,
    candidates: &[String],
) -> Result<String, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::Empty("candidates"));
    }
    let p = prediction.trim();
    if let Some(c) = candidates.iter().find(|c| c.trim() == p) {
        return Ok(c.clone());
    }
    let mut texts = Vec::with_capacity(candidates.len() + 1);
    texts.push(prediction.to_string());
    texts.extend(candidates.iter().cloned());
    let vectors = embedder.embed(&texts)?;
    let (query, rest) = vectors
        .split_first()
        .ok_or_else(|| ProviderError::Response("no embeddings returned".into()))?;
    let mut best: Option<(f64, usize)> = None;
    for (i, v) in rest.iter().enumerate() {
        let score = cosine(query, v).unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, i));
        }
    }
    let (_, i) = best.expect("candidates non-empty");
    Ok(candidates[i].clone())
}

/// Cosine of the two texts' embeddings.
pub fn answer_similarity(embedder: &dyn Embedder, prediction: &str, gold: &str) -> Result<f64, EvalError> {
    if prediction.trim().is_empty() || gold.trim().is_empty() {
        return Err(EvalError::Empty("answer text"));
    }
    let v = embedder.embed(&[prediction.to_string(), gold.to_string()])?;
    if v.len() != 2 {
        return Err(ProviderError::Response(format!("asked for 2 embeddings, got {}", v.len())).into());
    }
    Ok(cosine(&v[0], &v[1])?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextMetrics {
    /// Absent when nothing was recalled or no gold ids are known.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub entity_recall: Option<f64>,
}

/// Set-based context precision, recall and entity recall.
///
/// Entities match as substrings of the whitespace-normalized concatenation of
/// the recalled texts.
pub fn context_metrics<S: AsRef<str>>(
    recalled_ids: &BTreeSet<String>,
    gold_context_ids: &BTreeSet<String>,
    gold_entities: &[S],
    recalled_texts: &[S],
) -> ContextMetrics {
    let mut m = ContextMetrics::default();
    if !gold_context_ids.is_empty() {
        let hit = recalled_ids.intersection(gold_context_ids).count() as f64;
        m.recall = Some(hit / gold_context_ids.len() as f64);
        if !recalled_ids.is_empty() {
            m.precision = Some(hit / recalled_ids.len() as f64);
        }
    }
    let entities: BTreeSet<String> = gold_entities
        .iter()
        .map(|e| normalize(e.as_ref()))
        .filter(|e| !e.is_empty())
        .collect();
    if !entities.is_empty() {
        let haystack = normalize(
            &recalled_texts
                .iter()
                .map(|t| t.as_ref())
                .collect::<Vec<_>>()
                .join("\n"),
        );
        let found = entities.iter().filter(|e| haystack.contains(e.as_str())).count();
        m.entity_recall = Some(found as f64 / entities.len() as f64);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeItem {
    pub item_id: String,
    pub question: String,
    pub triples: Vec<Triple>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub item_id: String,
    /// Absent when the judge output held no integer.
    pub score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub scores: Vec<JudgeScore>,
    pub mean: Option<f64>,
}

/// Score each triple set on a 0 to 5 scale.
///
/// Out-of-range replies are clamped and unparseable replies left unscored,
/// both with a warning. Transport failures abort the run.
pub fn judge_triples(
    judge: &dyn LanguageModel,
    prompts: &PromptSet,
    items: &[JudgeItem],
) -> Result<JudgeReport, EvalError> {
    let mut scores = Vec::with_capacity(items.len());
    for item in items {
        let raw = judge_score(judge, prompts, &item.item_id, &item.question, &item.triples)?;
        let (score, warning) = match parse_likert(&raw) {
            Ok(l) if l.clamped => (
                Some(l.score),
                Some(format!("judge reply {raw:?} out of range; clamped to {}", l.score)),
            ),
            Ok(l) => (Some(l.score), None),
            Err(e) => (None, Some(e)),
        };
        if let Some(w) = &warning {
            tracing::warn!(item = %item.item_id, warning = %w, "judge");
        }
        scores.push(JudgeScore {
            item_id: item.item_id.clone(),
            score,
            warning,
        });
    }
    let valid: Vec<f64> = scores.iter().filter_map(|s| s.score).map(f64::from).collect();
    let mean = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
    Ok(JudgeReport { scores, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    /// `b - a` per item.
    pub deltas: Vec<i32>,
    pub improved: usize,
    pub worsened: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// Per-item score deltas between two judged runs and a sign-test p-value.
pub fn compare_scores(a: &[u8], b: &[u8]) -> Result<PairedComparison, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            predictions: a.len(),
            golds: b.len(),
        });
    }
    let deltas: Vec<i32> = a.iter().zip(b).map(|(&x, &y)| i32::from(y) - i32::from(x)).collect();
    let improved = deltas.iter().filter(|&&d| d > 0).count();
    let worsened = deltas.iter().filter(|&&d| d < 0).count();
    Ok(PairedComparison {
        ties: deltas.len() - improved - worsened,
        p_value: sign_test(improved, worsened),
        deltas,
        improved,
        worsened,
    })
}

/// Exact two-sided sign test; ties are discarded beforehand.
pub fn sign_test(positive: usize, negative: usize) -> f64 {
    let n = positive + negative;
    if n == 0 {
        return 1.0;
    }
    let m = positive.min(negative);
    // log C(n, i) accumulated incrementally
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_c = 0.0f64;
    let mut tail = 0.0f64;
    for i in 0..=m {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_c + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}
