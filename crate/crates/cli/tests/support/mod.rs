//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod oracle;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kgrag_core::corpus::{parse_corpus, Corpus};
use kgrag_core::evalkit::{read_dataset, EvalItem};
use kgrag_core::personalize::{read_training, QAPair};
use kgrag_core::providers::{MockEmbedder, MockModel, Providers};
use serde::Deserialize;

pub fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo")
}

pub fn demo_file(name: &str) -> PathBuf {
    demo_dir().join(name)
}

pub fn demo_config() -> PathBuf {
    demo_file("kgrag.toml")
}

pub fn demo_corpus() -> Corpus {
    parse_corpus(BufReader::new(File::open(demo_file("corpus.jsonl")).unwrap())).unwrap()
}

pub fn demo_training() -> Vec<QAPair> {
    read_training(BufReader::new(File::open(demo_file("training.jsonl")).unwrap())).unwrap()
}

pub fn demo_benchmark() -> Vec<EvalItem> {
    read_dataset(BufReader::new(File::open(demo_file("benchmark.jsonl")).unwrap())).unwrap()
}

#[derive(Debug, Clone, Deserialize)]
pub struct ScriptLine {
    pub question: String,
    pub path: String,
}

pub fn demo_cot_script() -> Vec<ScriptLine> {
    std::fs::read_to_string(demo_file("cot_script.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Mock providers whose path model replies from `script`.
pub fn scripted_providers(script: &[(String, String)]) -> Providers {
    let model = script
        .iter()
        .fold(MockModel::default(), |m, (q, p)| m.with_cot(q, p));
    Providers::mock_with(MockEmbedder::default(), model)
}

pub fn demo_providers() -> Providers {
    let script: Vec<(String, String)> = demo_cot_script()
        .into_iter()
        .map(|l| (l.question, l.path))
        .collect();
    scripted_providers(&script)
}

/// Run the `kgrag` binary with the demo config and the given artifact root.
pub fn kgrag(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgrag"))
        .arg("--config")
        .arg(demo_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("KGRAG_CONFIG")
        .env_remove("KGRAG_MOCK")
        .env_remove("KGRAG_K")
        .env_remove("KGRAG_STRATEGY")
        .env_remove("KGRAG_DATASET")
        .env_remove("KGRAG_OUT")
        .env_remove("KGRAG_GRAPH_FILTER")
        .env_remove("RUST_LOG")
        .output()
        .expect("kgrag binary runs")
}

pub fn expect_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}
