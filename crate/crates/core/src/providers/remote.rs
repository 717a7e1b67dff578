//! OpenAI-compatible `/chat/completions` and `/embeddings` client.

use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EmbeddingVector, Embedder, LanguageModel, PromptRequest, ProviderError};

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff() -> u64 {
    250
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key. Keys are never
    /// read from or written to config files.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    /// Expected embedding dimension, checked against every response.
    #[serde(default)]
    pub dims: Option<usize>,
}

impl ProviderConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        ProviderConfig {
            base_url: base_url.to_string(),
            model: model.to_string(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            cache_path: None,
            max_in_flight: default_in_flight(),
            retry_backoff_ms: default_backoff(),
            dims: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.timeout_secs > 0.0) {
            return Err(ProviderError::Config("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ProviderError::Config("max_in_flight must be at least 1".into()));
        }
        if self.base_url.trim().is_empty() || self.model.trim().is_empty() {
            return Err(ProviderError::Config("base_url and model are required".into()));
        }
        Ok(())
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct OpenAiCompatible {
    config: ProviderConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: Limiter,
}

impl OpenAiCompatible {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ProviderError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(OpenAiCompatible {
            limiter: Limiter::new(config.max_in_flight),
            config,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value, ProviderError> {
        let url = self.url(path);
        let attempts = self.config.max_retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.config.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(4));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let result = {
                let _permit = self.limiter.acquire();
                let mut req = self.client.post(&url).json(body);
                if let Some(key) = &self.api_key {
                    req = req.bearer_auth(key);
                }
                req.send()
            };
            match result {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.text().map_err(|e| ProviderError::Transport {
                        attempts: attempt + 1,
                        message: e.to_string(),
                    });
                    match text {
                        Ok(text) if (200..300).contains(&status) => {
                            return serde_json::from_str(&text)
                                .map_err(|e| ProviderError::Response(e.to_string()));
                        }
                        Ok(text) => {
                            let err = ProviderError::Http { status, body: text };
                            if !err.is_retryable() {
                                return Err(err);
                            }
                            last = Some(err);
                        }
                        Err(e) => last = Some(e),
                    }
                }
                Err(e) => {
                    last = Some(ProviderError::Transport {
                        attempts: attempt + 1,
                        message: e.to_string(),
                    })
                }
            }
            tracing::warn!(url = %url, attempt = attempt + 1, "provider request failed");
        }
        Err(match last {
            Some(ProviderError::Transport { message, .. }) => ProviderError::Transport { attempts, message },
            Some(other) => other,
            None => ProviderError::Transport {
                attempts,
                message: "no attempt made".into(),
            },
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl LanguageModel for OpenAiCompatible {
    fn model_id(&self) -> String {
        format!("openai:{}", self.config.model)
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": 0,
        });
        let value = self.post("chat/completions", &body)?;
        let resp: ChatResponse =
            serde_json::from_value(value).map_err(|e| ProviderError::Response(e.to_string()))?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Response("no choices in chat response".into()))
    }
}

impl Embedder for OpenAiCompatible {
    fn model_id(&self) -> String {
        format!("openai:{}", self.config.model)
    }

    fn dims(&self) -> Option<usize> {
        self.config.dims
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(ProviderError::InvalidInput(format!("text {i} is empty")));
        }
        let body = json!({"model": self.config.model, "input": texts});
        let value = self.post("embeddings", &body)?;
        let mut resp: EmbeddingResponse =
            serde_json::from_value(value).map_err(|e| ProviderError::Response(e.to_string()))?;
        if resp.data.len() != texts.len() {
            return Err(ProviderError::Response(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        resp.data.sort_by_key(|d| d.index.unwrap_or(usize::MAX));
        let vectors: Vec<EmbeddingVector> = resp
            .data
            .into_iter()
            .map(|d| EmbeddingVector::new(d.embedding))
            .collect();
        let expected = self.config.dims.unwrap_or(vectors[0].dims());
        if let Some(v) = vectors.iter().find(|v| v.dims() != expected) {
            return Err(ProviderError::DimensionMismatch {
                expected,
                found: v.dims(),
            });
        }
        Ok(vectors)
    }
}
