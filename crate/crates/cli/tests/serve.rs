mod support;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use kgrag_cli::serve::router;
use kgrag_core::engine::{Engine, EngineConfig, KnowledgeBase};
use kgrag_core::personalize::{build_personal_kg, PersonalizeOptions};
use serde_json::{json, Value};
use tower::ServiceExt;

fn engine(personalized: bool) -> Arc<Engine> {
    let providers = support::demo_providers();
    let kb = KnowledgeBase::build(support::demo_corpus(), &providers, 330).unwrap();
    let pk = personalized.then(|| {
        Arc::new(build_personal_kg(&support::demo_training(), kb.general(), &providers, PersonalizeOptions::with_k(20)).unwrap())
    });
    Arc::new(Engine::new(Arc::new(kb), pk, providers, EngineConfig::default()))
}

async fn call(engine: &Arc<Engine>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = router(engine.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn healthz_reports_layers() {
    let (status, body) = call(&engine(false), "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["personalized"], false);
    assert_eq!(body["embedding_model"], "mock-ngram-256");
}

#[tokio::test]
async fn query_returns_the_bundle() {
    let e = engine(true);
    let q = "患者发热汗出恶风脉浮缓，当用何方？";
    let (status, body) = call(&e, "POST", "/query", Some(json!({ "question": q }).to_string())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["strategy"], "personalized");
    assert_eq!(body["k"], 20);
    assert!(!body["evidence_chains"].as_array().unwrap().is_empty());
    let direct = serde_json::to_value(e.answer_query(q, 20, None).unwrap()).unwrap();
    assert_eq!(body, direct);

    let req = json!({ "question": q, "strategy": "macro", "k": 3 }).to_string();
    let (status, body) = call(&e, "POST", "/query", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["evidence_texts"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn bad_requests_are_400() {
    let e = engine(false);
    for body in ["not json", "{}", r#"{"question":"   "}"#, r#"{"question":"x","k":0}"#] {
        let (status, resp) = call(&e, "POST", "/query", Some(body.to_string())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(resp["error"]["kind"], "usage");
        assert_eq!(resp["error"]["code"], 400);
    }
}

#[tokio::test]
async fn personalized_without_layer_is_409() {
    let req = json!({ "question": "发热", "strategy": "personalized" }).to_string();
    let (status, resp) = call(&engine(false), "POST", "/query", Some(req)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(resp["error"]["kind"], "missing-prerequisite");
    assert!(resp["trace"].is_array());
}
