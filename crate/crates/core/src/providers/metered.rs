use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{EmbeddingVector, Embedder, LanguageModel, PromptRequest, ProviderError};

/// Counts calls made through a provider.
#[derive(Debug, Default)]
pub struct Metered<T> {
    inner: T,
    calls: AtomicUsize,
    items: AtomicUsize,
}

impl<T> Metered<T> {
    pub fn new(inner: T) -> Self {
        Metered {
            inner,
            calls: AtomicUsize::new(0),
            items: AtomicUsize::new(0),
        }
    }

    /// Number of `embed` batches or `complete` calls.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Number of texts embedded (equals `calls` for language models).
    pub fn items(&self) -> usize {
        self.items.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.items.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: Embedder> Embedder for Metered<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }

    fn dims(&self) -> Option<usize> {
        self.inner.dims()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.items.fetch_add(texts.len(), Ordering::SeqCst);
        self.inner.embed(texts)
    }
}

impl<T: LanguageModel> LanguageModel for Metered<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.items.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

/// Captures every request sent to the wrapped model, in call order.
#[derive(Debug, Default)]
pub struct Recording<T> {
    inner: T,
    log: Mutex<Vec<PromptRequest>>,
}

impl<T> Recording<T> {
    pub fn new(inner: T) -> Self {
        Recording {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<PromptRequest> {
        self.log.lock().expect("recording lock").clone()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.requests().into_iter().map(|r| r.prompt).collect()
    }

    pub fn clear(&self) {
        self.log.lock().expect("recording lock").clear();
    }
}

impl<T: LanguageModel> LanguageModel for Recording<T> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }

    fn complete(&self, request: &PromptRequest) -> Result<String, ProviderError> {
        self.log
            .lock()
            .expect("recording lock")
            .push(request.clone());
        self.inner.complete(request)
    }
}
