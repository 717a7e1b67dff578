//! HTTP service over a loaded engine.

use std::sync::Arc;

use anyhow::{Context, Result};
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgrag_core::engine::{Engine, EngineError, QueryRequest, TraceEvent};
use serde_json::json;

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/query", post(query))
        .route("/healthz", get(healthz))
        .with_state(engine)
}

fn error_response(status: StatusCode, kind: &str, message: &str, trace: Vec<TraceEvent>) -> Response {
    let body = json!({
        "error": { "code": status.as_u16(), "kind": kind, "message": message },
        "trace": trace,
    });
    (status, Json(body)).into_response()
}

async fn query(State(engine): State<Arc<Engine>>, body: Result<Json<QueryRequest>, JsonRejection>) -> Response {
    let req = match body {
        Ok(Json(req)) => req,
        Err(rej) => return error_response(StatusCode::BAD_REQUEST, "usage", &rej.body_text(), Vec::new()),
    };
    // the engine makes blocking provider calls
    match tokio::task::spawn_blocking(move || engine.handle(&req)).await {
        Ok(Ok(bundle)) => Json(bundle).into_response(),
        Ok(Err(failure)) => {
            let (status, kind) = match &failure.error {
                EngineError::EmptyQuestion | EngineError::InvalidK => (StatusCode::BAD_REQUEST, "usage"),
                EngineError::NotPersonalized => (StatusCode::CONFLICT, "missing-prerequisite"),
                e if e.is_provider() => (StatusCode::BAD_GATEWAY, "provider"),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            };
            error_response(status, kind, &failure.error.to_string(), failure.trace)
        }
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", &e.to_string(), Vec::new()),
    }
}

async fn healthz(State(engine): State<Arc<Engine>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "personalized": engine.personal.is_some(),
        "embedding_model": engine.providers.embedder.model_id(),
        "prompt_version": engine.providers.prompts.version,
    }))
}

/// Bind `addr` and serve until ctrl-c.
pub fn serve(engine: Engine, addr: &str) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("cannot start async runtime")?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("cannot bind {addr}"))?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, router(Arc::new(engine)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("server error")
    })
}
