//! Deterministic offline providers.

use std::collections::BTreeMap;

use xxhash_rust::xxh3::xxh3_64;

use super::{EmbeddingVector, Embedder, LanguageModel, PromptRequest, ProviderError, Task};

pub const DEFAULT_MOCK_DIMS: usize = 256;

/// Hashed character 2- and 3-gram counts, L2-normalized.
///
/// N-grams are taken inside whitespace-separated tokens, so tokens of a single
/// character contribute nothing. A text with no n-grams at all embeds to the
/// zero vector, which the retrieval layer treats as degenerate.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dims: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        MockEmbedder {
            dims: DEFAULT_MOCK_DIMS,
        }
    }
}

impl MockEmbedder {
    pub fn new(dims: usize) -> Self {
        assert!(dims > 0, "mock embedding needs at least one dimension");
        MockEmbedder { dims }
    }

    /// Bucket index of every n-gram in `text`, with repetition.
    pub fn buckets(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut buf = [0u8; 12];
        for token in text.split_whitespace() {
            let chars: Vec<char> = token.chars().collect();
            for n in [2usize, 3] {
                for gram in chars.windows(n) {
                    let mut len = 0;
                    for c in gram {
                        len += c.encode_utf8(&mut buf[len..]).len();
                    }
                    out.push((xxh3_64(&buf[..len]) % self.dims as u64) as usize);
                }
            }
        }
        out
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut counts = vec![0f64; self.dims];
        for b in self.buckets(text) {
            counts[b] += 1.0;
        }
        let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut counts {
                *v /= norm;
            }
        }
        EmbeddingVector::new(counts)
    }
}

impl Embedder for MockEmbedder {
    fn model_id(&self) -> String {
        format!("mock-ngram-{}", self.dims)
    }

    fn dims(&self) -> Option<usize> {
        Some(self.dims)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Grammar-driven stand-in for every language-model role.
///
/// * extract: echoes the text, so its `S | R | O` lines are the triples
/// * decompose: echoes question and answer joined by a newline
/// * reason: `Q:<question>\nA:<answer>\nCTX:<sorted context ids>`
/// * cot: the scripted path for this question if any, else the question itself
/// * answer: `Q:<question>\nPATH:<triple renderings>\nSRC:<sorted text ids>`
/// * judge: the scripted reply for the item id, else `judge_default`
#[derive(Debug, Clone)]
pub struct MockModel {
    cot_script: BTreeMap<String, String>,
    judge_replies: BTreeMap<String, String>,
    judge_default: String,
}

impl Default for MockModel {
    fn default() -> Self {
        MockModel {
            cot_script: BTreeMap::new(),
            judge_replies: BTreeMap::new(),
            judge_default: "3".to_string(),
        }
    }
}

impl MockModel {
    /// Emulate a trained path model: reply `path` when asked about `question`.
    pub fn with_cot(mut self, question: &str, path: &str) -> Self {
        self.cot_script
            .insert(question.trim().to_string(), path.to_string());
        self
    }

    pub fn with_judge_reply(mut self, item_id: &str, reply: &str) -> Self {
        self.judge_replies
            .insert(item_id.to_string(), reply.to_string());
        self
    }

    pub fn with_judge_default(mut self, reply: &str) -> Self {
        self.judge_default = reply.to_string();
        self
    }
}

fn sorted_ids<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut ids: Vec<&str> = ids.collect();
    ids.sort_unstable();
    ids.dedup();
    ids.join(",")
}

impl LanguageModel for MockModel {
    fn model_id(&self) -> String {
        "mock-grammar".to_string()
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, ProviderError> {
        Ok(match &request.task {
            Task::Extract { text } => text.clone(),
            Task::Decompose { question, answer } => format!("{question}\n{answer}"),
            Task::Reason {
                question,
                answer,
                contexts,
            } => format!(
                "Q:{question}\nA:{answer}\nCTX:{}",
                sorted_ids(contexts.iter().map(|c| c.id.as_str()))
            ),
            Task::Cot { question } => self
                .cot_script
                .get(question.trim())
                .cloned()
                .unwrap_or_else(|| question.clone()),
            Task::Answer {
                question,
                triples,
                texts,
            } => format!(
                "Q:{question}\nPATH:{}\nSRC:{}",
                triples
                    .iter()
                    .map(|t| t.render())
                    .collect::<Vec<_>>()
                    .join("; "),
                sorted_ids(texts.iter().map(|c| c.id.as_str()))
            ),
            Task::Judge { item_id, .. } => self
                .judge_replies
                .get(item_id)
                .cloned()
                .unwrap_or_else(|| self.judge_default.clone()),
        })
    }
}
