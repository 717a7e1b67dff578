//! Exit codes and the structured error printed on failure.

use kgrag_core::engine::{EngineError, QueryFailure};
use kgrag_core::evalkit::EvalError;
use kgrag_core::personalize::PersonalizeError;
use kgrag_core::providers::ProviderError;
use kgrag_core::retrieval::RetrievalError;
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PREREQUISITE: i32 = 3;
pub const EXIT_PROVIDER: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// An artifact from an earlier command is missing.
    #[error("{message}; run {command} first")]
    Prerequisite { message: String, command: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    Usage,
    MissingPrerequisite,
    Provider,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::MissingPrerequisite => EXIT_PREREQUISITE,
            ErrorKind::Provider => EXIT_PROVIDER,
            ErrorKind::Internal => EXIT_FAILURE,
        }
    }
}

fn is_provider(e: &(dyn std::error::Error + 'static)) -> bool {
    if e.is::<ProviderError>() {
        return true;
    }
    if let Some(e) = e.downcast_ref::<EngineError>() {
        return e.is_provider();
    }
    if let Some(f) = e.downcast_ref::<QueryFailure>() {
        return f.error.is_provider();
    }
    matches!(e.downcast_ref::<RetrievalError>(), Some(RetrievalError::Provider(_)))
        || matches!(e.downcast_ref::<PersonalizeError>(), Some(PersonalizeError::Provider(_)))
        || matches!(e.downcast_ref::<EvalError>(), Some(EvalError::Provider(_)))
}

fn is_prerequisite(e: &(dyn std::error::Error + 'static)) -> bool {
    matches!(e.downcast_ref::<CliError>(), Some(CliError::Prerequisite { .. }))
        || matches!(e.downcast_ref::<PersonalizeError>(), Some(PersonalizeError::MissingGeneral))
        || matches!(e.downcast_ref::<EngineError>(), Some(EngineError::NotPersonalized))
        || matches!(
            e.downcast_ref::<QueryFailure>(),
            Some(QueryFailure { error: EngineError::NotPersonalized, .. })
        )
}

pub fn classify(err: &anyhow::Error) -> ErrorKind {
    for cause in err.chain() {
        if matches!(cause.downcast_ref::<CliError>(), Some(CliError::Usage(_))) {
            return ErrorKind::Usage;
        }
        if is_prerequisite(cause) {
            return ErrorKind::MissingPrerequisite;
        }
        if is_provider(cause) {
            return ErrorKind::Provider;
        }
    }
    ErrorKind::Internal
}

#[derive(Debug, Serialize)]
struct ErrorBody<'a> {
    code: i32,
    kind: ErrorKind,
    message: &'a str,
}

/// The context chain joined by `: `, skipping causes already quoted by the
/// message before them.
pub fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

/// `{"error":{"code":..,"kind":..,"message":..}}` for stderr.
pub fn render(err: &anyhow::Error) -> String {
    let kind = classify(err);
    let message = message(err);
    serde_json::json!({ "error": ErrorBody { code: kind.exit_code(), kind, message: &message } })
        .to_string()
}
