//! Command-line surface and the seven commands.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use kgrag_core::corpus::{Corpus, CorpusBuilder};
use kgrag_core::engine::{Engine, KnowledgeBase, QueryRequest};
use kgrag_core::evalkit::{read_dataset, run_benchmark, summary_table, write_reports, BenchmarkOptions};
use kgrag_core::personalize::{
    build_personal_kg, export_sft, read_training, write_sft, PersonalKg, PersonalizeOptions,
};
use kgrag_core::providers::{
    CachedEmbedder, Embedder, LanguageModel, MockEmbedder, MockModel, OpenAiCompatible, PromptSet,
    ProviderConfig, Providers,
};
use kgrag_core::retrieval::Strategy;
use kgrag_core::store::{self, MANIFEST_FILE};
use serde::Deserialize;
use serde_json::json;

use crate::config::AppConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "kgrag", version, about = "Knowledge-graph retrieval-augmented question answering")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true, env = "KGRAG_CONFIG")]
    pub config: Option<PathBuf>,
    /// Use deterministic offline providers.
    #[arg(long, global = true, env = "KGRAG_MOCK")]
    pub mock: bool,
    /// Items recalled per channel.
    #[arg(long, global = true, env = "KGRAG_K", value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
    /// Retrieval strategy; `eval` accepts a comma-separated list.
    #[arg(long, global = true, env = "KGRAG_STRATEGY", value_delimiter = ',')]
    pub strategy: Vec<Strategy>,
    /// Training cases for `personalize`, benchmark items for `eval`.
    #[arg(long, global = true, env = "KGRAG_DATASET")]
    pub dataset: Option<PathBuf>,
    /// Restrict personalized recall to triples with this dataset tag.
    #[arg(long, global = true, env = "KGRAG_GRAPH_FILTER")]
    pub graph_filter: Option<String>,
    /// Artifact root directory.
    #[arg(long, global = true, env = "KGRAG_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Parse corpus files into the corpus store.
    Ingest {
        /// Line-delimited corpus records; defaults to `paths.corpus`.
        inputs: Vec<PathBuf>,
    },
    /// Extract triples and build the general graph, mappings and indexes.
    BuildKg,
    /// Build the personalized graph from worked cases.
    Personalize,
    /// Write fine-tuning records from the reasoning chains.
    ExportSft,
    /// Answer one question and print the answer bundle as JSON.
    Query { question: String },
    /// Serve `POST /query` and `GET /healthz` until interrupted.
    Serve {
        #[arg(long, env = "KGRAG_ADDR", default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Run the benchmark under each requested strategy.
    Eval,
}

/// Configuration after flags and environment have been applied.
#[derive(Debug, Clone)]
pub struct Settings {
    pub config: AppConfig,
    /// Strategies named on the command line, if any.
    pub strategies: Vec<Strategy>,
    pub dataset: Option<PathBuf>,
    pub graph_filter: Option<String>,
}

impl Settings {
    pub fn resolve(global: &GlobalArgs) -> Result<Self> {
        let mut config = match &global.config {
            Some(path) => AppConfig::from_file(path)?,
            None => AppConfig::default(),
        };
        if global.mock {
            config.defaults.mock = true;
        }
        if let Some(k) = global.k {
            config.defaults.k = usize::try_from(k).context("k out of range")?;
        }
        if let Some(out) = &global.out {
            config.paths.work_dir = out.clone();
        }
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(Settings {
            config,
            strategies: global.strategy.clone(),
            dataset: global.dataset.clone(),
            graph_filter: global.graph_filter.clone(),
        })
    }

    pub fn work(&self) -> &Path {
        &self.config.paths.work_dir
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.work().join("corpus")
    }

    pub fn kg_dir(&self) -> PathBuf {
        self.work().join("kg")
    }

    pub fn personal_dir(&self) -> PathBuf {
        self.work().join("personal")
    }

    pub fn sft_dir(&self) -> PathBuf {
        self.work().join("sft")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.work().join("eval")
    }

    fn cache_file(&self, embedding: &ProviderConfig) -> PathBuf {
        embedding
            .cache_path
            .clone()
            .or_else(|| self.config.paths.cache.clone())
            .unwrap_or_else(|| self.work().join("cache").join("embeddings.jsonl"))
    }
}

#[derive(Debug, Deserialize)]
struct CotLine {
    question: String,
    path: String,
}

/// Providers for one process.
pub struct Runtime {
    pub providers: Providers,
    pub metric_embedder: Arc<dyn Embedder>,
    cache: Option<Arc<CachedEmbedder<OpenAiCompatible>>>,
}

impl Runtime {
    /// Mock mode builds only the offline mocks; nothing here can open a
    /// connection unless remote providers are configured and mock is off.
    pub fn new(settings: &Settings) -> Result<Self> {
        let cfg = &settings.config;
        let prompts = match &cfg.paths.prompts {
            Some(dir) => PromptSet::load_dir(dir)?,
            None => PromptSet::default(),
        };
        let mut rt = if cfg.defaults.mock {
            Runtime::mock(cfg)?
        } else {
            Runtime::remote(settings)?
        };
        rt.providers.prompts = Arc::new(prompts);
        Ok(rt)
    }

    fn mock(cfg: &AppConfig) -> Result<Self> {
        let mut model = MockModel::default().with_judge_default(&cfg.mock.judge_default);
        if let Some(path) = &cfg.mock.cot_script {
            let lines: Vec<CotLine> = store::read_jsonl(path)
                .with_context(|| format!("cannot read cot script {}", path.display()))?;
            for l in lines {
                model = model.with_cot(&l.question, &l.path);
            }
        }
        let embedder = MockEmbedder::new(cfg.mock.dims);
        Ok(Runtime {
            metric_embedder: Arc::new(embedder.clone()),
            providers: Providers::mock_with(embedder, model),
            cache: None,
        })
    }

    fn remote(settings: &Settings) -> Result<Self> {
        let section = &settings.config.providers;
        let embedding = section
            .embedding
            .as_ref()
            .ok_or_else(|| anyhow!("providers.embedding is required unless mock mode is on"))?;
        let generation = section
            .generation
            .as_ref()
            .ok_or_else(|| anyhow!("providers.generation is required unless mock mode is on"))?;
        let model = |role: &Option<ProviderConfig>| -> Result<Arc<dyn LanguageModel>> {
            Ok(Arc::new(OpenAiCompatible::new(role.as_ref().unwrap_or(generation).clone())?))
        };
        let cache_file = settings.cache_file(embedding);
        if let Some(parent) = cache_file.parent() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
        let cache = Arc::new(CachedEmbedder::open(OpenAiCompatible::new(embedding.clone())?, &cache_file)?);
        let metric_embedder: Arc<dyn Embedder> = match &section.metric_embedding {
            Some(c) => Arc::new(OpenAiCompatible::new(c.clone())?),
            None => cache.clone(),
        };
        Ok(Runtime {
            providers: Providers {
                embedder: cache.clone(),
                extractor: model(&section.extraction)?,
                decomposer: model(&section.decomposition)?,
                generator: model(&section.generation)?,
                cot: model(&section.cot)?,
                judge: model(&section.judge)?,
                prompts: Arc::new(PromptSet::default()),
            },
            metric_embedder,
            cache: Some(cache),
        })
    }

    /// Flush the embedding cache, if one is in use.
    pub fn persist(&self) -> Result<()> {
        if let Some(c) = &self.cache {
            c.persist()?;
        }
        Ok(())
    }
}

fn require(dir: &Path, what: &str, command: &'static str) -> Result<()> {
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(());
    }
    Err(CliError::Prerequisite {
        message: format!("no {what} at {}", dir.display()),
        command,
    }
    .into())
}

fn load_corpus(s: &Settings) -> Result<Corpus> {
    let dir = s.corpus_dir();
    require(&dir, "corpus store", "ingest")?;
    Ok(Corpus::load(&dir)?)
}

pub fn load_kb(s: &Settings, rt: &Runtime) -> Result<KnowledgeBase> {
    let dir = s.kg_dir();
    require(&dir, "knowledge graph", "build-kg")?;
    let corpus = load_corpus(s)?;
    let e = &rt.providers.embedder;
    Ok(KnowledgeBase::load(corpus, &dir, &e.model_id(), e.dims())?)
}

fn load_personal(s: &Settings, rt: &Runtime) -> Result<PersonalKg> {
    let dir = s.personal_dir();
    require(&dir, "personalized graph", "personalize")?;
    let e = &rt.providers.embedder;
    Ok(PersonalKg::load(&dir, &e.model_id(), e.dims())?)
}

/// General knowledge plus the personalized layer when one exists.
pub fn load_engine(s: &Settings, rt: &Runtime) -> Result<Engine> {
    let kb = load_kb(s, rt)?;
    let personal = if s.personal_dir().join(MANIFEST_FILE).is_file() {
        Some(Arc::new(load_personal(s, rt)?))
    } else {
        None
    };
    Ok(Engine::new(
        Arc::new(kb),
        personal,
        rt.providers.clone(),
        s.config.engine_config(),
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn dataset_path(s: &Settings, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    s.dataset
        .clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what}; pass --dataset")).into())
}

fn summary(out: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(out, "{value}")?;
    Ok(())
}

fn ingest(s: &Settings, inputs: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    let inputs = if inputs.is_empty() { &s.config.paths.corpus[..] } else { inputs };
    if inputs.is_empty() {
        return Err(CliError::Usage("no corpus inputs; pass files or set paths.corpus".into()).into());
    }
    let mut builder = CorpusBuilder::new();
    for path in inputs {
        builder
            .add_reader(open(path)?)
            .with_context(|| format!("in {}", path.display()))?;
    }
    let corpus = builder.finish();
    if corpus.is_empty() {
        anyhow::bail!("corpus inputs contain no snippets");
    }
    corpus.validate().map_err(|e| anyhow!("invalid corpus: {e}"))?;
    corpus.save(&s.corpus_dir())?;
    let stats = corpus.stats();
    summary(
        out,
        json!({
            "command": "ingest",
            "books": corpus.books().len(),
            "snippets": stats.snippet_count,
            "mean_char_count": stats.mean_char_count,
        }),
    )
}

fn build_kg(s: &Settings, rt: &Runtime, out: &mut dyn Write) -> Result<()> {
    let corpus = load_corpus(s)?;
    let kb = KnowledgeBase::build(corpus, &rt.providers, s.config.defaults.segment_len)?;
    kb.save(&s.kg_dir())?;
    let failed = kb.notes.iter().filter(|n| n.error.is_some()).count();
    summary(
        out,
        json!({
            "command": "build-kg",
            "triples": kb.graph.len(),
            "fixed_segments": kb.fixed.len(),
            "extraction_failures": failed,
        }),
    )
}

fn personalize(s: &Settings, rt: &Runtime, out: &mut dyn Write) -> Result<()> {
    let kb = load_kb(s, rt)?;
    let path = dataset_path(s, &s.config.paths.training, "training set")?;
    let training = read_training(open(&path)?).with_context(|| format!("in {}", path.display()))?;
    let k = s.config.defaults.k;
    let opts = PersonalizeOptions {
        k_triples: k,
        k_snippets: k,
        triple_query: s.config.defaults.triple_query,
    };
    let pk = build_personal_kg(&training, kb.general(), &rt.providers, opts)?;
    pk.save(&s.personal_dir())?;
    summary(
        out,
        json!({
            "command": "personalize",
            "processed": pk.report.processed(),
            "skipped": pk.report.skipped(),
            "chains": pk.chains.len(),
            "new_triples": pk.report.new_triples,
            "m2_links": pk.report.m2_links,
        }),
    )
}

fn export(s: &Settings, rt: &Runtime, out: &mut dyn Write) -> Result<()> {
    let pk = load_personal(s, rt)?;
    let records = export_sft(&pk.chains)?;
    write_sft(&s.sft_dir(), &records)?;
    summary(out, json!({ "command": "export-sft", "records": records.len() }))
}

fn single_strategy(s: &Settings) -> Result<Option<Strategy>> {
    match s.strategies.as_slice() {
        [] => Ok(None),
        [one] => Ok(Some(*one)),
        _ => Err(CliError::Usage("query takes a single --strategy".into()).into()),
    }
}

fn query(s: &Settings, rt: &Runtime, question: &str, out: &mut dyn Write) -> Result<()> {
    let strategy = single_strategy(s)?;
    let engine = load_engine(s, rt)?;
    let req = QueryRequest {
        question: question.to_string(),
        k: Some(s.config.defaults.k),
        strategy,
        graph_filter: s.graph_filter.clone(),
    };
    let bundle = engine.handle(&req).map_err(|f| {
        tracing::debug!(steps = f.trace.len(), "query failed after partial trace");
        anyhow::Error::new(f)
    })?;
    let text = serde_json::to_string_pretty(&bundle)?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn eval(s: &Settings, rt: &Runtime, out: &mut dyn Write) -> Result<()> {
    let path = dataset_path(s, &s.config.paths.benchmark, "benchmark dataset")?;
    let items = read_dataset(open(&path)?).with_context(|| format!("in {}", path.display()))?;
    let engine = load_engine(s, rt)?;
    let strategies = if s.strategies.is_empty() {
        vec![s.config.defaults.strategy]
    } else {
        s.strategies.clone()
    };
    let dataset_tag = s.config.defaults.dataset_tag.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let mut reports = Vec::with_capacity(strategies.len());
    for strategy in strategies {
        let opts = BenchmarkOptions {
            dataset_tag: dataset_tag.clone(),
            strategy,
            k: s.config.defaults.k,
            graph_filter: s.graph_filter.clone(),
        };
        tracing::info!(%strategy, items = items.len(), "benchmark");
        reports.push(run_benchmark(&engine, &items, &opts, rt.metric_embedder.as_ref())?);
    }
    write_reports(&s.eval_dir(), &reports)?;
    write!(out, "{}", summary_table(&reports))?;
    Ok(())
}

/// Run one parsed command, writing its primary output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let settings = Settings::resolve(&cli.global)?;
    if let Some(n) = settings.config.concurrency.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            tracing::debug!(error = %e, "thread pool already configured");
        }
    }
    if let Command::Ingest { inputs } = &cli.command {
        return ingest(&settings, inputs, out);
    }
    let rt = Runtime::new(&settings)?;
    let result = match &cli.command {
        Command::Ingest { .. } => unreachable!("handled above"),
        Command::BuildKg => build_kg(&settings, &rt, out),
        Command::Personalize => personalize(&settings, &rt, out),
        Command::ExportSft => export(&settings, &rt, out),
        Command::Query { question } => query(&settings, &rt, question, out),
        Command::Serve { addr } => load_engine(&settings, &rt).and_then(|e| crate::serve::serve(e, addr)),
        Command::Eval => eval(&settings, &rt, out),
    };
    rt.persist()?;
    result
}
