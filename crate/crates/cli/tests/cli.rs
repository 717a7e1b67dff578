mod support;

use std::path::Path;
use std::process::Command;

use serde_json::Value;
use support::{demo_file, expect_ok, kgrag, oracle};

const GOLDEN_QUESTION: &str = "患者发热汗出恶风脉浮缓，当用何方？";

fn stderr_json(out: &std::process::Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no error body in {text}"));
    serde_json::from_str(line).unwrap()
}

fn stdout_json(out: &std::process::Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

/// A config with no `[defaults]` values other than mock mode.
fn bare_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("bare.toml");
    let text = format!(
        "[paths]\nwork_dir = \"work\"\ncorpus = [{:?}]\ntraining = {:?}\nbenchmark = {:?}\n\n[defaults]\nmock = true\n\n[mock]\ncot_script = {:?}\n",
        demo_file("corpus.jsonl"),
        demo_file("training.jsonl"),
        demo_file("benchmark.jsonl"),
        demo_file("cot_script.jsonl"),
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn bare(config: &Path, args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kgrag"));
    cmd.arg("--config").arg(config).args(args);
    for var in ["KGRAG_CONFIG", "KGRAG_MOCK", "KGRAG_K", "KGRAG_STRATEGY", "KGRAG_DATASET", "KGRAG_OUT", "KGRAG_GRAPH_FILTER", "RUST_LOG"] {
        cmd.env_remove(var);
    }
    cmd
}

#[test]
fn query_before_build_kg_is_a_missing_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kgrag(tmp.path(), &["query", "发热"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "missing-prerequisite");
    assert!(err["error"]["message"].as_str().unwrap().contains("run build-kg first"));

    let out = kgrag(tmp.path(), &["build-kg"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_json(&out)["error"]["message"].as_str().unwrap().contains("run ingest first"));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(kgrag(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(kgrag(tmp.path(), &["--k", "0", "query", "x"]).status.code(), Some(2));
    assert_eq!(kgrag(tmp.path(), &["--strategy", "sideways", "query", "x"]).status.code(), Some(2));

    expect_ok(&kgrag(tmp.path(), &["ingest"]), "ingest");
    expect_ok(&kgrag(tmp.path(), &["build-kg"]), "build-kg");
    let out = kgrag(tmp.path(), &["--strategy", "macro,micro", "query", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");
}

#[test]
fn default_wiring_uses_k20_and_330_char_segments() {
    let tmp = tempfile::tempdir().unwrap();
    let config = bare_config(tmp.path());
    let run = |args: &[&str]| {
        let out = bare(&config, args).output().unwrap();
        expect_ok(&out, &format!("{args:?}"));
        out
    };
    run(&["ingest"]);
    let built = stdout_json(&run(&["build-kg"]));

    // independent count of 330-char windows per book
    let raw = std::fs::read_to_string(demo_file("corpus.jsonl")).unwrap();
    let mut per_book: std::collections::BTreeMap<String, usize> = Default::default();
    for doc in oracle::docs_from_jsonl(&raw) {
        *per_book.entry(doc.book).or_default() += doc.text.chars().count();
    }
    let windows: usize = per_book.values().map(|n| n.div_ceil(330)).sum();
    assert_eq!(built["fixed_segments"], windows);

    let answer = stdout_json(&run(&["query", GOLDEN_QUESTION]));
    assert_eq!(answer["k"], 20);
    assert_eq!(answer["strategy"], "integrated");

    let report = |name: &str| std::fs::read(tmp.path().join("work/eval/integrated/report.json").with_file_name(name)).unwrap();
    run(&["eval", "--strategy", "integrated", "--k", "20"]);
    let explicit = (report("report.json"), report("rows.jsonl"));
    let parsed: Value = serde_json::from_slice(&explicit.0).unwrap();
    assert_eq!(parsed["strategy"], "integrated");
    assert_eq!(parsed["k"], 20);
    assert_eq!(parsed["aggregates"]["items"], 20);
    assert_eq!(parsed["aggregates"]["context_recall"], 1.0);

    run(&["eval"]);
    assert_eq!((report("report.json"), report("rows.jsonl")), explicit);
}

#[test]
fn flags_override_environment_override_file() {
    let tmp = tempfile::tempdir().unwrap();
    let config = bare_config(tmp.path());
    for step in ["ingest", "build-kg"] {
        expect_ok(&bare(&config, &[step]).output().unwrap(), step);
    }
    let k_of = |cmd: &mut Command| stdout_json(&cmd.output().unwrap())["k"].clone();

    assert_eq!(k_of(&mut bare(&config, &["query", "发热"])), 20);
    let with_k = tmp.path().join("k5.toml");
    let text = std::fs::read_to_string(&config).unwrap().replace("mock = true", "mock = true\nk = 5");
    std::fs::write(&with_k, text).unwrap();
    assert_eq!(k_of(&mut bare(&with_k, &["query", "发热"])), 5);
    assert_eq!(k_of(bare(&with_k, &["query", "发热"]).env("KGRAG_K", "7")), 7);
    assert_eq!(k_of(bare(&with_k, &["--k", "9", "query", "发热"]).env("KGRAG_K", "7")), 9);
    let strategy = stdout_json(&bare(&with_k, &["query", "发热"]).env("KGRAG_STRATEGY", "macro").output().unwrap());
    assert_eq!(strategy["strategy"], "macro");
}

#[test]
fn golden_integrated_answer() {
    let tmp = tempfile::tempdir().unwrap();
    expect_ok(&kgrag(tmp.path(), &["ingest"]), "ingest");
    expect_ok(&kgrag(tmp.path(), &["build-kg"]), "build-kg");
    let out = kgrag(tmp.path(), &["--strategy", "integrated", "query", GOLDEN_QUESTION]);
    expect_ok(&out, "query");
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/query_answer.json")).unwrap();
    assert_eq!(String::from_utf8(out.stdout.clone()).unwrap(), golden);

    let bundle = stdout_json(&out);
    let raw = std::fs::read_to_string(demo_file("corpus.jsonl")).unwrap();
    let g = oracle::general(&oracle::docs_from_jsonl(&raw));
    let want = oracle::integrated(&g, GOLDEN_QUESTION, &oracle::answer_template(), 20);
    assert_eq!(bundle["answer"], want["answer"]);
    let prompt = bundle["trace"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["step"] == "generate")
        .map(|e| e["prompt"].clone());
    assert_eq!(prompt, Some(want["prompt"].clone()));
    let pairs = |v: &Value, id: &str| -> Vec<(String, f64)> {
        v.as_array()
            .unwrap()
            .iter()
            .map(|h| (h[id].as_str().unwrap().to_string(), h["score"].as_f64().unwrap()))
            .collect()
    };
    assert_eq!(pairs(&bundle["recalled_triples"], "triple_id"), pairs(&want["triple_hits"], "item_id"));
    assert_eq!(pairs(&bundle["evidence_texts"], "item_id"), pairs(&want["hits"], "item_id"));
}

#[test]
fn closed_stdout_is_not_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    expect_ok(&kgrag(tmp.path(), &["ingest"]), "ingest");
    expect_ok(&kgrag(tmp.path(), &["build-kg"]), "build-kg");
    let mut child = Command::new(env!("CARGO_BIN_EXE_kgrag"))
        .arg("--config")
        .arg(support::demo_config())
        .arg("--out")
        .arg(tmp.path())
        .args(["query", GOLDEN_QUESTION])
        .env_remove("RUST_LOG")
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    drop(child.stdout.take());
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
