//! Externally modeled capabilities: embedding, triple extraction, QA
//! decomposition, reasoning generation, reasoning-path decomposition, answer
//! generation and judging.
//!
//! Everything model-backed goes through two traits, [`Embedder`] and
//! [`LanguageModel`], with a remote OpenAI-compatible implementation and a
//! deterministic mock. The functions in this module own prompt rendering and
//! output parsing, so the two implementations only differ in how they turn a
//! [`PromptRequest`] into text.

mod cache;
mod metered;
mod mock;
pub mod parse;
pub mod prompts;
mod remote;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::TextUnit;
use crate::kg::Triple;

pub use cache::CachedEmbedder;
pub use metered::{Metered, Recording};
pub use mock::{MockEmbedder, MockModel, DEFAULT_MOCK_DIMS};
pub use parse::{LikertScore, Parsed};
pub use prompts::PromptSet;
pub use remote::{OpenAiCompatible, ProviderConfig};

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Response(String),
    #[error("provider configuration error: {0}")]
    Config(String),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("provider returned empty output for {task}")]
    EmptyOutput { task: &'static str },
    #[error("embedding cache error: {0}")]
    Cache(String),
}

impl ProviderError {
    /// Transient failures worth retrying at a higher level.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport { .. } => true,
            ProviderError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// A dense embedding with its Euclidean norm cached.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        EmbeddingVector { values, norm }
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.norm > 0.0) || !self.norm.is_finite()
    }

    /// Round every component to `f32`, the precision used by stored indexes.
    pub fn to_f32_precision(&self) -> EmbeddingVector {
        EmbeddingVector::new(self.values.iter().map(|&v| f64::from(v as f32)).collect())
    }
}

impl Serialize for EmbeddingVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.values.serialize(s)
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(EmbeddingVector::new(Vec::<f64>::deserialize(d)?))
    }
}

pub trait Embedder: Send + Sync {
    /// Identifies provider and model, e.g. `mock-ngram-256`.
    fn model_id(&self) -> String;

    /// Output dimension when known in advance.
    fn dims(&self) -> Option<usize>;

    /// One vector per input, in order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn dims(&self) -> Option<usize> {
        (**self).dims()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed(texts)
    }
}

/// What a model is being asked to do, with the structured inputs the prompt
/// was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Extract {
        text: String,
    },
    Decompose {
        question: String,
        answer: String,
    },
    Reason {
        question: String,
        answer: String,
        contexts: Vec<TextUnit>,
    },
    Cot {
        question: String,
    },
    Answer {
        question: String,
        triples: Vec<Triple>,
        texts: Vec<TextUnit>,
    },
    Judge {
        item_id: String,
        question: String,
        triples: Vec<Triple>,
    },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Extract { .. } => "extract",
            Task::Decompose { .. } => "decompose",
            Task::Reason { .. } => "reason",
            Task::Cot { .. } => "cot",
            Task::Answer { .. } => "answer",
            Task::Judge { .. } => "judge",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRequest {
    pub task: Task,
    /// The rendered prompt; what a remote model actually receives.
    pub prompt: String,
}

pub trait LanguageModel: Send + Sync {
    fn model_id(&self) -> String;
    fn complete(&self, request: &PromptRequest) -> Result<String, ProviderError>;
}

impl<T: LanguageModel + ?Sized> LanguageModel for Arc<T> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }
    fn complete(&self, request: &PromptRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

/// One model per role plus the prompt set they share.
#[derive(Clone)]
pub struct Providers {
    pub embedder: Arc<dyn Embedder>,
    pub extractor: Arc<dyn LanguageModel>,
    pub decomposer: Arc<dyn LanguageModel>,
    pub generator: Arc<dyn LanguageModel>,
    pub cot: Arc<dyn LanguageModel>,
    pub judge: Arc<dyn LanguageModel>,
    pub prompts: Arc<PromptSet>,
}

impl Providers {
    /// Every role backed by the deterministic mocks.
    pub fn mock() -> Self {
        Providers::mock_with(MockEmbedder::default(), MockModel::default())
    }

    pub fn mock_with(embedder: MockEmbedder, model: MockModel) -> Self {
        let model: Arc<dyn LanguageModel> = Arc::new(model);
        Providers {
            embedder: Arc::new(embedder),
            extractor: model.clone(),
            decomposer: model.clone(),
            generator: model.clone(),
            cot: model.clone(),
            judge: model,
            prompts: Arc::new(PromptSet::default()),
        }
    }
}

/// Triples parsed from a provider response, with the raw text kept for audit.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub triples: Vec<Triple>,
    pub diagnostics: Vec<String>,
    pub raw_text: String,
}

/// The ordered multi-hop path parsed from a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDecomposition {
    pub steps: Vec<Triple>,
    pub raw_text: String,
    /// Set when parsing failed and the fallback triple was substituted.
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

pub const FALLBACK_RELATION: &str = "relates_to";

fn require(value: &str, what: &str) -> Result<(), ProviderError> {
    if value.trim().is_empty() {
        Err(ProviderError::InvalidInput(format!("{what} must not be empty")))
    } else {
        Ok(())
    }
}

fn call(
    model: &dyn LanguageModel,
    template: &str,
    fill: prompts::Fill<'_>,
    task: Task,
) -> Result<String, ProviderError> {
    let request = PromptRequest {
        prompt: prompts::render(template, &fill),
        task,
    };
    model.complete(&request)
}

fn extraction(raw: String) -> Extraction {
    let parsed = parse::parse_triple_lines(&raw);
    for d in &parsed.diagnostics {
        tracing::warn!(diagnostic = %d, "triple extraction");
    }
    Extraction {
        triples: parsed.triples,
        diagnostics: parsed.diagnostics,
        raw_text: raw,
    }
}

/// Pull `S | R | O` triples out of a snippet or reasoning text.
pub fn extract_triples(
    model: &dyn LanguageModel,
    prompts: &PromptSet,
    text: &str,
) -> Result<Extraction, ProviderError> {
    require(text, "text")?;
    let fill = prompts::Fill {
        text,
        ..Default::default()
    };
    let raw = call(
        model,
        &prompts.extract,
        fill,
        Task::Extract {
            text: text.to_string(),
        },
    )?;
    Ok(extraction(raw))
}

/// Decompose a worked question/answer pair into its reasoning-chain triples.
pub fn decompose_qa(
    model: &dyn LanguageModel,
    prompts: &PromptSet,
    question: &str,
    answer: &str,
) -> Result<Extraction, ProviderError> {
    require(question, "question")?;
    require(answer, "gold answer")?;
    let fill = prompts::Fill {
        question,
        answer,
        ..Default::default()
    };
    let raw = call(
        model,
        &prompts.decompose,
        fill,
        Task::Decompose {
            question: question.to_string(),
            answer: answer.to_string(),
        },
    )?;
    Ok(extraction(raw))
}

/// Generate the reasoning text from question to answer over the given contexts.
///
/// `contexts` are rendered into the prompt in the order given.
pub fn generate_reasoning(
    model: &dyn LanguageModel,
    prompts: &PromptSet,
    question: &str,
    answer: &str,
    contexts: &[TextUnit],
) -> Result<String, ProviderError> {
    require(question, "question")?;
    let rendered = prompts::render_contexts(contexts);
    let fill = prompts::Fill {
        question,
        answer,
        contexts: &rendered,
        ..Default::default()
    };
    let out = call(
        model,
        &prompts.reason,
        fill,
        Task::Reason {
            question: question.to_string(),
            answer: answer.to_string(),
            contexts: contexts.to_vec(),
        },
    )?;
    if out.trim().is_empty() {
        return Err(ProviderError::EmptyOutput { task: "reason" });
    }
    Ok(out)
}

/// Parse a question into its multi-hop reasoning path.
///
/// If nothing parses, the path degrades to the single triple
/// `(question, relates_to, question)` and `degraded` is set.
pub fn cot_decompose(
    model: &dyn LanguageModel,
    prompts: &PromptSet,
    question: &str,
) -> Result<ChainDecomposition, ProviderError> {
    require(question, "question")?;
    let fill = prompts::Fill {
        question,
        ..Default::default()
    };
    let raw = call(
        model,
        &prompts.cot,
        fill,
        Task::Cot {
            question: question.to_string(),
        },
    )?;
    let parsed = parse::parse_reasoning_path(&raw);
    if parsed.triples.is_empty() {
        let fallback = crate::kg::Triple::new(question, FALLBACK_RELATION, question)
            .map_err(|e| ProviderError::InvalidInput(e.to_string()))?;
        tracing::warn!("reasoning path unparseable; using fallback triple");
        return Ok(ChainDecomposition {
            steps: vec![fallback],
            raw_text: raw,
            degraded: true,
            diagnostics: parsed.diagnostics,
        });
    }
    Ok(ChainDecomposition {
        steps: parsed.triples,
        raw_text: raw,
        degraded: false,
        diagnostics: parsed.diagnostics,
    })
}

/// The answer prompt exactly as [`generate_answer`] sends it.
pub fn answer_prompt(prompts: &PromptSet, question: &str, triples: &[Triple], texts: &[TextUnit]) -> String {
    let rendered_triples = prompts::render_triple_list(triples);
    let rendered_texts = prompts::render_contexts(texts);
    prompts::render(
        &prompts.answer,
        &prompts::Fill {
            question,
            triples: &rendered_triples,
            contexts: &rendered_texts,
            ..Default::default()
        },
    )
}

/// Final answer from the recalled reasoning path and its text sources.
pub fn generate_answer(
    model: &dyn LanguageModel,
    prompts: &PromptSet,
    question: &str,
    triples: &[Triple],
    texts: &[TextUnit],
) -> Result<String, ProviderError> {
    require(question, "question")?;
    let request = PromptRequest {
        prompt: answer_prompt(prompts, question, triples, texts),
        task: Task::Answer {
            question: question.to_string(),
            triples: triples.to_vec(),
            texts: texts.to_vec(),
        },
    };
    let out = model.complete(&request)?;
    if out.trim().is_empty() {
        return Err(ProviderError::EmptyOutput { task: "answer" });
    }
    Ok(out)
}

/// Ask the judge for a 0–5 score of a triple set.
pub fn judge_score(
    model: &dyn LanguageModel,
    prompts: &PromptSet,
    item_id: &str,
    question: &str,
    triples: &[Triple],
) -> Result<String, ProviderError> {
    let rendered = prompts::render_triple_list(triples);
    let fill = prompts::Fill {
        question,
        triples: &rendered,
        ..Default::default()
    };
    call(
        model,
        &prompts.judge,
        fill,
        Task::Judge {
            item_id: item_id.to_string(),
            question: question.to_string(),
            triples: triples.to_vec(),
        },
    )
}
