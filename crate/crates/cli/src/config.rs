//! Application configuration.
//!
//! Values resolve as flags > environment > config file > defaults. Flags and
//! their environment variables are handled by clap; this module covers the
//! file and the defaults. Relative paths in a config file are taken relative
//! to the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kgrag_core::corpus::DEFAULT_SEGMENT_LEN;
use kgrag_core::engine::{EngineConfig, DEFAULT_EVIDENCE_BUDGET};
use kgrag_core::providers::{ProviderConfig, DEFAULT_MOCK_DIMS};
use kgrag_core::retrieval::{Strategy, TripleQueryMode, DEFAULT_K};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub paths: Paths,
    pub defaults: Defaults,
    pub concurrency: Concurrency,
    pub providers: ProviderSection,
    pub mock: MockSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of all artifact directories.
    pub work_dir: PathBuf,
    /// Corpus inputs for `ingest`.
    pub corpus: Vec<PathBuf>,
    /// Worked cases for `personalize`.
    pub training: Option<PathBuf>,
    /// Benchmark items for `eval`.
    pub benchmark: Option<PathBuf>,
    /// Directory of prompt template overrides.
    pub prompts: Option<PathBuf>,
    /// Embedding cache file (remote providers only).
    pub cache: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            work_dir: PathBuf::from("work"),
            corpus: Vec::new(),
            training: None,
            benchmark: None,
            prompts: None,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub k: usize,
    pub segment_len: usize,
    pub mock: bool,
    pub strategy: Strategy,
    /// Tag recorded in eval reports; defaults to the dataset file stem.
    pub dataset_tag: Option<String>,
    pub evidence_budget: Option<usize>,
    pub include_snippets: bool,
    pub triple_query: TripleQueryMode,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            k: DEFAULT_K,
            segment_len: DEFAULT_SEGMENT_LEN,
            mock: false,
            strategy: Strategy::Integrated,
            dataset_tag: None,
            evidence_budget: Some(DEFAULT_EVIDENCE_BUDGET),
            include_snippets: false,
            triple_query: TripleQueryMode::Joined,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Concurrency {
    /// Worker threads for per-item parallelism; unset uses all cores.
    pub threads: Option<usize>,
}

/// Remote provider per role. Roles left unset fall back to `generation`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub embedding: Option<ProviderConfig>,
    pub generation: Option<ProviderConfig>,
    pub extraction: Option<ProviderConfig>,
    pub decomposition: Option<ProviderConfig>,
    pub cot: Option<ProviderConfig>,
    pub judge: Option<ProviderConfig>,
    /// Embedder for answer similarity; defaults to `embedding`.
    pub metric_embedding: Option<ProviderConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub dims: usize,
    /// Line-delimited `{question, path}` replies for the mock path model.
    pub cot_script: Option<PathBuf>,
    pub judge_default: String,
}

impl Default for MockSection {
    fn default() -> Self {
        MockSection {
            dims: DEFAULT_MOCK_DIMS,
            cot_script: None,
            judge_default: "3".into(),
        }
    }
}

impl AppConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: AppConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        fix(&mut p.work_dir);
        p.corpus.iter_mut().for_each(fix);
        for path in [&mut p.training, &mut p.benchmark, &mut p.prompts, &mut p.cache].into_iter().flatten() {
            fix(path);
        }
        if let Some(path) = &mut self.mock.cot_script {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.defaults.k == 0 {
            bail!("k must be positive");
        }
        if self.defaults.segment_len == 0 {
            bail!("segment length must be positive");
        }
        if self.mock.dims == 0 {
            bail!("mock embedding dimension must be positive");
        }
        if self.concurrency.threads == Some(0) {
            bail!("threads must be positive");
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            k: self.defaults.k,
            evidence_budget: self.defaults.evidence_budget,
            include_snippets: self.defaults.include_snippets,
            triple_query: self.defaults.triple_query,
        }
    }
}
