//! Structured corpus ingestion: chapter hierarchy plus content snippets.
//!
//! Input is one JSON record per line, each carrying the book id, the heading
//! path from the book root down to the owning chapter, and the snippet text.
//! Every prefix of a heading path becomes a [`ChapterNode`]; heading paths are
//! taken literally, so a book that skips a level simply has a shallower branch.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ids::content_id;
use crate::store::{self, Manifest, StoreError};

/// Default fixed-segment length, in Unicode scalar values.
pub const DEFAULT_SEGMENT_LEN: usize = 330;

const NODES_FILE: &str = "nodes.jsonl";
const SNIPPETS_FILE: &str = "snippets.jsonl";
const MANIFEST_KIND: &str = "corpus";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: input is not valid UTF-8")]
    Encoding { line: usize },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: heading_path must not be empty")]
    EmptyHeadingPath { line: usize },
    #[error("line {line}: book `{book_id}` already has root `{existing}`, got `{found}`")]
    RootMismatch {
        line: usize,
        book_id: String,
        existing: String,
        found: String,
    },
    #[error("segment length must be positive")]
    InvalidSegmentLength,
    #[error("read error at line {line}: {source}")]
    Read {
        line: usize,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChapterNode {
    pub node_id: String,
    pub title: String,
    pub depth: usize,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub book_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub snippet_id: String,
    pub node_id: String,
    pub heading_path: Vec<String>,
    pub text: String,
    pub char_count: usize,
}

impl Snippet {
    /// Heading path joined by ` > `, a newline, then the body.
    pub fn render(&self) -> String {
        format!("{}\n{}", self.heading_path.join(" > "), self.text)
    }
}

pub fn snippet_id(heading_path: &[String], text: &str) -> String {
    content_id("s", &json!(["snippet", heading_path, text]))
}

fn node_id(book_id: &str, path: &[String]) -> String {
    content_id("n", &json!(["node", book_id, path]))
}

/// A retrievable unit of text: an id plus the text that gets embedded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextUnit {
    pub id: String,
    pub text: String,
}

/// One input line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub book_id: String,
    pub heading_path: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub snippet_count: usize,
    pub mean_char_count: f64,
}

/// The document set: chapter trees for each book plus their snippets.
///
/// Immutable once built; nodes and snippets keep first-seen order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    books: Vec<String>,
    nodes: Vec<ChapterNode>,
    snippets: Vec<Snippet>,
    node_pos: HashMap<String, usize>,
    snippet_pos: HashMap<String, usize>,
}

impl Corpus {
    pub fn books(&self) -> &[String] {
        &self.books
    }

    pub fn nodes(&self) -> &[ChapterNode] {
        &self.nodes
    }

    pub fn snippets(&self) -> &[Snippet] {
        &self.snippets
    }

    pub fn node(&self, node_id: &str) -> Option<&ChapterNode> {
        self.node_pos.get(node_id).map(|&i| &self.nodes[i])
    }

    pub fn snippet(&self, snippet_id: &str) -> Option<&Snippet> {
        self.snippet_pos.get(snippet_id).map(|&i| &self.snippets[i])
    }

    pub fn contains_snippet(&self, snippet_id: &str) -> bool {
        self.snippet_pos.contains_key(snippet_id)
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn root(&self, book_id: &str) -> Option<&ChapterNode> {
        self.nodes
            .iter()
            .find(|n| n.depth == 0 && n.book_id == book_id)
    }

    pub fn stats(&self) -> CorpusStats {
        let total: usize = self.snippets.iter().map(|s| s.char_count).sum();
        let mean = if self.snippets.is_empty() {
            0.0
        } else {
            total as f64 / self.snippets.len() as f64
        };
        CorpusStats {
            snippet_count: self.snippets.len(),
            mean_char_count: mean,
        }
    }

    /// Check the tree invariants. Used after loading and in tests.
    pub fn validate(&self) -> Result<(), String> {
        for book in &self.books {
            let roots = self
                .nodes
                .iter()
                .filter(|n| &n.book_id == book && n.depth == 0)
                .count();
            if roots != 1 {
                return Err(format!("book `{book}` has {roots} roots"));
            }
        }
        for node in &self.nodes {
            match &node.parent {
                None if node.depth != 0 => {
                    return Err(format!("node {} has no parent at depth {}", node.node_id, node.depth))
                }
                None => {}
                Some(p) => {
                    let parent = self
                        .node(p)
                        .ok_or_else(|| format!("node {} has unknown parent {p}", node.node_id))?;
                    if parent.depth + 1 != node.depth {
                        return Err(format!("node {} depth is inconsistent", node.node_id));
                    }
                    if !parent.children.contains(&node.node_id) {
                        return Err(format!("parent {p} does not list child {}", node.node_id));
                    }
                }
            }
            for child in &node.children {
                let c = self
                    .node(child)
                    .ok_or_else(|| format!("node {} lists unknown child {child}", node.node_id))?;
                if c.parent.as_deref() != Some(node.node_id.as_str()) {
                    return Err(format!("child {child} does not point back to {}", node.node_id));
                }
            }
        }
        for snippet in &self.snippets {
            if self.node(&snippet.node_id).is_none() {
                return Err(format!("snippet {} has unknown node", snippet.snippet_id));
            }
            if snippet.char_count != snippet.text.chars().count() {
                return Err(format!("snippet {} char_count is stale", snippet.snippet_id));
            }
        }
        Ok(())
    }

    /// Atomically write the corpus store to `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        store::replace_dir(dir, |d| {
            store::write_jsonl(&d.join(NODES_FILE), &self.nodes)?;
            store::write_jsonl(&d.join(SNIPPETS_FILE), &self.snippets)?;
            let stats = self.stats();
            Manifest::new(MANIFEST_KIND)
                .count("books", self.books.len())
                .count("nodes", self.nodes.len())
                .count("snippets", stats.snippet_count)
                .meta("mean_char_count", stats.mean_char_count)
                .meta("books", self.books.clone())
                .write(d)
        })?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let manifest = Manifest::read(dir, MANIFEST_KIND)?;
        let nodes: Vec<ChapterNode> = store::read_jsonl(&dir.join(NODES_FILE))?;
        let snippets: Vec<Snippet> = store::read_jsonl(&dir.join(SNIPPETS_FILE))?;
        let books: Vec<String> = manifest
            .meta
            .get("books")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| StoreError::Invalid("corpus manifest lacks book list".into()))?;
        let corpus = Corpus::from_parts(books, nodes, snippets);
        if manifest.counts.get("snippets").copied() != Some(corpus.snippets.len() as u64) {
            return Err(StoreError::Invalid("snippet count disagrees with manifest".into()).into());
        }
        corpus.validate().map_err(StoreError::Invalid)?;
        Ok(corpus)
    }

    fn from_parts(books: Vec<String>, nodes: Vec<ChapterNode>, snippets: Vec<Snippet>) -> Self {
        let node_pos = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.node_id.clone(), i))
            .collect();
        let snippet_pos = snippets
            .iter()
            .enumerate()
            .map(|(i, s)| (s.snippet_id.clone(), i))
            .collect();
        Corpus {
            books,
            nodes,
            snippets,
            node_pos,
            snippet_pos,
        }
    }
}

/// Accumulates records into a [`Corpus`], possibly across several inputs.
#[derive(Debug, Default)]
pub struct CorpusBuilder {
    corpus: Corpus,
    roots: HashMap<String, String>,
}

impl CorpusBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_record(&mut self, record: CorpusRecord, line: usize) -> Result<(), CorpusError> {
        if record.heading_path.is_empty() {
            return Err(CorpusError::EmptyHeadingPath { line });
        }
        if record.book_id.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: "book_id must not be empty".into(),
            });
        }
        if record.heading_path.iter().any(|t| t.trim().is_empty()) {
            return Err(CorpusError::Malformed {
                line,
                message: "heading_path entries must not be empty".into(),
            });
        }
        if record.text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: "text must not be empty".into(),
            });
        }
        let root_title = &record.heading_path[0];
        match self.roots.get(&record.book_id) {
            Some(existing) if existing != root_title => {
                return Err(CorpusError::RootMismatch {
                    line,
                    book_id: record.book_id,
                    existing: existing.clone(),
                    found: root_title.clone(),
                });
            }
            Some(_) => {}
            None => {
                self.roots
                    .insert(record.book_id.clone(), root_title.clone());
                self.corpus.books.push(record.book_id.clone());
            }
        }

        let c = &mut self.corpus;
        let mut parent: Option<String> = None;
        for depth in 0..record.heading_path.len() {
            let prefix = &record.heading_path[..=depth];
            let id = node_id(&record.book_id, prefix);
            if !c.node_pos.contains_key(&id) {
                c.node_pos.insert(id.clone(), c.nodes.len());
                c.nodes.push(ChapterNode {
                    node_id: id.clone(),
                    title: prefix[depth].clone(),
                    depth,
                    parent: parent.clone(),
                    children: Vec::new(),
                    book_id: record.book_id.clone(),
                });
                if let Some(p) = &parent {
                    let pi = c.node_pos[p];
                    c.nodes[pi].children.push(id.clone());
                }
            }
            parent = Some(id);
        }

        let sid = snippet_id(&record.heading_path, &record.text);
        if !c.snippet_pos.contains_key(&sid) {
            c.snippet_pos.insert(sid.clone(), c.snippets.len());
            c.snippets.push(Snippet {
                snippet_id: sid,
                node_id: parent.expect("heading path is non-empty"),
                char_count: record.text.chars().count(),
                heading_path: record.heading_path,
                text: record.text,
            });
        }
        Ok(())
    }

    /// Parse a line-delimited stream. Blank lines are skipped.
    pub fn add_reader<R: BufRead>(&mut self, mut reader: R) -> Result<(), CorpusError> {
        let mut buf = Vec::new();
        let mut line = 0usize;
        loop {
            buf.clear();
            let read = reader
                .read_until(b'\n', &mut buf)
                .map_err(|source| CorpusError::Read { line: line + 1, source })?;
            if read == 0 {
                break;
            }
            line += 1;
            let text = std::str::from_utf8(&buf).map_err(|_| CorpusError::Encoding { line })?;
            if text.trim().is_empty() {
                continue;
            }
            let record: CorpusRecord =
                serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
                    line,
                    message: e.to_string(),
                })?;
            self.add_record(record, line)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Corpus {
        self.corpus
    }
}

pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
    let mut builder = CorpusBuilder::new();
    builder.add_reader(reader)?;
    Ok(builder.finish())
}

/// A fixed-length window together with the snippets it fully contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedSegment {
    pub snippet: Snippet,
    pub covers: Vec<String>,
}

/// Split each book's concatenated text into `target_len`-char windows.
pub fn segment_fixed(corpus: &Corpus, target_len: usize) -> Result<Vec<Snippet>, CorpusError> {
    Ok(segment_fixed_with_sources(corpus, target_len)?
        .into_iter()
        .map(|s| s.snippet)
        .collect())
}

/// [`segment_fixed`], also reporting which original snippets each window
/// contains in full.
pub fn segment_fixed_with_sources(
    corpus: &Corpus,
    target_len: usize,
) -> Result<Vec<FixedSegment>, CorpusError> {
    if target_len == 0 {
        return Err(CorpusError::InvalidSegmentLength);
    }
    let mut by_book: HashMap<&str, Vec<&Snippet>> = HashMap::new();
    for s in corpus.snippets() {
        if let Some(node) = corpus.node(&s.node_id) {
            by_book.entry(node.book_id.as_str()).or_default().push(s);
        }
    }
    let mut out = Vec::new();
    for book in corpus.books() {
        let root = corpus
            .root(book)
            .expect("every ingested book has a root node");
        let mut chars: Vec<char> = Vec::new();
        // (snippet_id, start, end) in char offsets of the concatenated text
        let mut spans: Vec<(&str, usize, usize)> = Vec::new();
        for s in by_book.get(book.as_str()).into_iter().flatten() {
            let start = chars.len();
            chars.extend(s.text.chars());
            spans.push((&s.snippet_id, start, chars.len()));
        }
        for (index, window) in chars.chunks(target_len).enumerate() {
            let start = index * target_len;
            let end = start + window.len();
            let text: String = window.iter().collect();
            let heading_path = vec![book.clone(), format!("fixed:{index}")];
            let covers = spans
                .iter()
                .filter(|(_, s, e)| *s >= start && *e <= end)
                .map(|(id, _, _)| id.to_string())
                .collect();
            out.push(FixedSegment {
                snippet: Snippet {
                    snippet_id: snippet_id(&heading_path, &text),
                    node_id: root.node_id.clone(),
                    char_count: window.len(),
                    heading_path,
                    text,
                },
                covers,
            });
        }
    }
    Ok(out)
}

/// Snippets rendered with their title context, one unit per snippet.
pub fn macro_snippets(corpus: &Corpus) -> Vec<TextUnit> {
    corpus
        .snippets()
        .iter()
        .map(|s| TextUnit {
            id: s.snippet_id.clone(),
            text: s.render(),
        })
        .collect()
}
