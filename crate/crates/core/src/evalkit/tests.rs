use std::sync::Arc;

use super::*;
use crate::corpus::parse_corpus;
use crate::engine::{EngineConfig, KnowledgeBase};
use crate::kg::Triple;
use crate::providers::{Metered, MockEmbedder, MockModel, PromptSet, Providers};

fn ids(v: &[&str]) -> BTreeSet<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn accuracy_fixtures() {
    assert_eq!(accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
    assert_eq!(accuracy(&["a", "x", "y", "z"], &["a", "b", "c", "d"]).unwrap(), 0.25);
    assert!(matches!(
        accuracy(&["a"], &["a", "b"]),
        Err(EvalError::LengthMismatch { predictions: 1, golds: 2 })
    ));
    assert!(accuracy::<&str, &str>(&[], &[]).is_err());
}

#[test]
fn similarity_fixtures() {
    let m = MockEmbedder::default();
    assert!((answer_similarity(&m, "太阳中风", "太阳中风").unwrap() - 1.0).abs() < 1e-9);
    assert!(answer_similarity(&m, "咳嗽", "发热").unwrap().abs() < 1e-9);
    let ab = answer_similarity(&m, "恶寒发热", "发热汗出").unwrap();
    let ba = answer_similarity(&m, "发热汗出", "恶寒发热").unwrap();
    assert_eq!(ab, ba);
    assert!(answer_similarity(&m, "", "x").is_err());
}

#[test]
fn context_metric_fixtures() {
    let none: [&str; 0] = [];
    let m = context_metrics(&ids(&["d1", "d2"]), &ids(&["d1", "d2"]), &none, &none);
    assert_eq!((m.precision, m.recall, m.entity_recall), (Some(1.0), Some(1.0), None));
    let m = context_metrics(&ids(&["d1", "d2"]), &ids(&["d2", "d3"]), &none, &none);
    assert_eq!((m.precision, m.recall), (Some(0.5), Some(0.5)));
    let m = context_metrics(&ids(&[]), &ids(&["d1"]), &["A", "B"], &["text with A only"]);
    assert_eq!((m.precision, m.recall, m.entity_recall), (None, Some(0.0), Some(0.5)));
    let m = context_metrics(&ids(&["d1"]), &ids(&[]), &none, &none);
    assert_eq!(m, ContextMetrics::default());
}

#[test]
fn candidate_normalization() {
    let m = MockEmbedder::default();
    let c: Vec<String> = ["太阳中风", "阳明腑实", "少阳证"].iter().map(|s| s.to_string()).collect();
    assert_eq!(normalize_to_candidate(&m, " 少阳证 ", &c).unwrap(), "少阳证");
    assert_eq!(normalize_to_candidate(&m, "当属阳明腑实之证", &c).unwrap(), "阳明腑实");
}

#[test]
fn judge_mean_and_clamp() {
    let model = MockModel::default().with_judge_reply("a", "4").with_judge_reply("b", "4");
    let prompts = PromptSet::default();
    let t = Triple::new("x", "y", "z").unwrap();
    let item = |id: &str| JudgeItem {
        item_id: id.into(),
        question: "q".into(),
        triples: vec![t.clone()],
    };
    let r = judge_triples(&model, &prompts, &[item("a"), item("b")]).unwrap();
    assert_eq!(r.mean, Some(4.0));
    let clamp = MockModel::default().with_judge_reply("c", "7");
    let r = judge_triples(&clamp, &prompts, &[item("c")]).unwrap();
    assert_eq!(r.scores[0].score, Some(5));
    assert!(r.scores[0].warning.as_deref().unwrap().contains("clamped"));
    let junk = MockModel::default().with_judge_reply("d", "no idea");
    let r = judge_triples(&junk, &prompts, &[item("d")]).unwrap();
    assert_eq!((r.scores[0].score, r.mean), (None, None));
}

/// Two-sided p by enumerating all 2^n sign patterns.
fn sign_oracle(pos: usize, neg: usize) -> f64 {
    let n = pos + neg;
    if n == 0 {
        return 1.0;
    }
    let dev = (pos as f64 - n as f64 / 2.0).abs();
    let extreme = (0u64..1 << n)
        .filter(|m| (m.count_ones() as f64 - n as f64 / 2.0).abs() >= dev - 1e-12)
        .count();
    extreme as f64 / (1u64 << n) as f64
}

#[test]
fn sign_test_matches_enumeration() {
    for n in 0..=16 {
        for pos in 0..=n {
            let p = sign_test(pos, n - pos);
            assert!((p - sign_oracle(pos, n - pos)).abs() < 1e-12, "n={n} pos={pos}");
        }
    }
}

#[test]
fn paired_comparison_on_synthetic_scores() {
    let a = [2, 3, 3, 1, 4, 2, 3, 2, 1, 3];
    let b = [4, 4, 3, 3, 5, 4, 4, 3, 2, 4];
    let c = compare_scores(&a, &b).unwrap();
    assert_eq!((c.improved, c.worsened, c.ties), (9, 0, 1));
    assert_eq!(c.deltas[0], 2);
    assert!((c.p_value - sign_oracle(9, 0)).abs() < 1e-12);
    assert!(c.p_value < 0.05);
    assert!(compare_scores(&a, &b[..3]).is_err());
}

fn bench_engine(embed: Arc<Metered<MockEmbedder>>) -> Engine {
    let lines: Vec<String> = (0..10)
        .map(|i| {
            format!(
                r#"{{"book_id":"卷","heading_path":["卷","篇{i}"],"text":"方{i} | 主治 | 证候{i}"}}"#
            )
        })
        .collect();
    let corpus = parse_corpus(lines.join("\n").as_bytes()).unwrap();
    let mut providers = Providers::mock();
    providers.embedder = embed;
    let kb = KnowledgeBase::build(corpus, &providers, 12).unwrap();
    Engine::new(Arc::new(kb), None, providers, EngineConfig::default())
}

fn bench_items(engine: &Engine) -> Vec<EvalItem> {
    engine
        .kb
        .corpus
        .snippets()
        .iter()
        .enumerate()
        .map(|(i, s)| EvalItem {
            qa_id: format!("b{i:02}"),
            question: format!("方{i} 主治 何证"),
            gold_answer: format!("证候{i}"),
            candidates: Some((0..10).map(|j| format!("证候{j}")).collect()),
            gold_context_ids: Some(vec![s.snippet_id.clone()]),
            gold_entities: Some(vec![format!("证候{i}")]),
        })
        .collect()
}

fn opts(strategy: Strategy, k: usize) -> BenchmarkOptions {
    BenchmarkOptions {
        dataset_tag: "synthetic".into(),
        strategy,
        k,
        graph_filter: None,
    }
}

#[test]
fn integrated_beats_no_retrieval_and_none_never_embeds() {
    let embed = Arc::new(Metered::new(MockEmbedder::default()));
    let engine = bench_engine(embed.clone());
    let items = bench_items(&engine);
    let metric = MockEmbedder::default();
    embed.reset();
    let none = run_benchmark(&engine, &items, &opts(Strategy::None, 3), &metric).unwrap();
    assert_eq!(embed.calls(), 0);
    let integ = run_benchmark(&engine, &items, &opts(Strategy::Integrated, 3), &metric).unwrap();
    assert!(integ.aggregates.context_recall.unwrap() > none.aggregates.context_recall.unwrap());
    assert_eq!(none.aggregates.context_precision, None);
    assert_eq!(integ.aggregates, Aggregates::from_rows(&integ.rows));
    assert_eq!(integ.rows.len(), items.len());
    let qa: Vec<&str> = integ.rows.iter().map(|r| r.qa_id.as_str()).collect();
    let mut sorted = qa.clone();
    sorted.sort();
    assert_eq!(qa, sorted);
}

#[test]
fn per_item_failures_are_flagged_not_fatal() {
    let engine = bench_engine(Arc::new(Metered::new(MockEmbedder::default())));
    let items = bench_items(&engine);
    let r = run_benchmark(&engine, &items, &opts(Strategy::Personalized, 3), &MockEmbedder::default()).unwrap();
    assert_eq!(r.aggregates.failures, items.len());
    assert_eq!(r.aggregates.accuracy, 0.0);
    assert!(r.rows[0].error.as_deref().unwrap().contains("personalize first"));
    assert!(run_benchmark(&engine, &[], &opts(Strategy::None, 3), &MockEmbedder::default()).is_err());
}

#[test]
fn reports_round_trip_and_summary_has_column_order() {
    let engine = bench_engine(Arc::new(Metered::new(MockEmbedder::default())));
    let items = bench_items(&engine);
    let metric = MockEmbedder::default();
    let reports: Vec<EvalReport> = [Strategy::None, Strategy::Fixed, Strategy::Macro]
        .into_iter()
        .map(|s| run_benchmark(&engine, &items, &opts(s, 2), &metric).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    write_reports(&out, &reports).unwrap();
    assert_eq!(read_reports(&out).unwrap(), reports);
    let summary = std::fs::read_to_string(out.join(SUMMARY_FILE)).unwrap();
    let header = summary.lines().next().unwrap();
    let cols: Vec<&str> = header.split('|').map(str::trim).filter(|c| !c.is_empty()).collect();
    assert_eq!(
        cols,
        ["Strategy", "Accuracy", "Answer Similarity", "Context Precision", "Context Recall", "Context Entity Recall"]
    );
    assert!(summary.contains("| none | "));
}

#[test]
fn dataset_reader_checks_candidates() {
    let ok = r#"{"qa_id":"1","question":"q","gold_answer":"A","candidates":["A","B"]}"#;
    assert_eq!(read_dataset(ok.as_bytes()).unwrap().len(), 1);
    let bad = r#"{"qa_id":"1","question":"q","gold_answer":"C","candidates":["A","B"]}"#;
    assert!(matches!(read_dataset(bad.as_bytes()), Err(EvalError::InvalidItem { line: 1, .. })));
}
