//! Triples, knowledge graphs and the triple-to-source mapping tables.
//!
//! `M1` links general-graph triples to the corpus snippets they were
//! extracted from; `M2` links personalized triples to the reasoning chains
//! they came from. Both are many-to-many and keep forward and reverse maps
//! as exact transposes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ids::content_id;
use crate::store::{self, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("triple {field} is empty after normalization")]
    EmptyComponent { field: &'static str },
    #[error("unknown source id `{source_id}` for triple ({subject}, {relation}, {object})")]
    UnknownSource {
        source_id: String,
        subject: String,
        relation: String,
        object: String,
    },
    #[error("stored triple id {stored} does not match its content ({computed})")]
    IdMismatch { stored: String, computed: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Trim and collapse internal whitespace runs to one space. No case folding.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub triple_id: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Self, KgError> {
        let subject = normalize(subject);
        let relation = normalize(relation);
        let object = normalize(object);
        for (field, value) in [("subject", &subject), ("relation", &relation), ("object", &object)] {
            if value.is_empty() {
                return Err(KgError::EmptyComponent { field });
            }
        }
        Ok(Triple {
            triple_id: triple_id(&subject, &relation, &object),
            subject,
            relation,
            object,
        })
    }

    /// Canonical text used for embedding: `subject relation object`.
    pub fn render(&self) -> String {
        format!("{} {} {}", self.subject, self.relation, self.object)
    }

    pub fn as_parts(&self) -> [&str; 3] {
        [&self.subject, &self.relation, &self.object]
    }
}

fn triple_id(subject: &str, relation: &str, object: &str) -> String {
    content_id("t", &json!(["triple", subject, relation, object]))
}

/// Newline-joined canonical renderings; the embedding input for a triple list.
pub fn render_triples(triples: &[Triple]) -> String {
    triples
        .iter()
        .map(Triple::render)
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    General,
    Query,
    Personalized,
}

/// Which graph a triple came from after merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    General,
    Personal,
    Both,
}

impl Provenance {
    pub fn combine(self, other: Provenance) -> Provenance {
        if self == other {
            self
        } else {
            Provenance::Both
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleRecord {
    pub triple: Triple,
    pub provenance: Provenance,
    /// Dataset tags of the training sources that produced this triple.
    pub tags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    kind: GraphKind,
    triples: BTreeMap<String, TripleRecord>,
    entity_index: BTreeMap<String, BTreeSet<String>>,
}

impl KnowledgeGraph {
    pub fn new(kind: GraphKind) -> Self {
        KnowledgeGraph {
            kind,
            triples: BTreeMap::new(),
            entity_index: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, triple_id: &str) -> bool {
        self.triples.contains_key(triple_id)
    }

    pub fn get(&self, triple_id: &str) -> Option<&TripleRecord> {
        self.triples.get(triple_id)
    }

    /// Records in ascending triple-id order.
    pub fn records(&self) -> impl Iterator<Item = &TripleRecord> {
        self.triples.values()
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.values().map(|r| &r.triple)
    }

    /// Triple ids whose subject or object equals `entity` (after normalization).
    pub fn mentioning(&self, entity: &str) -> Option<&BTreeSet<String>> {
        self.entity_index.get(&normalize(entity))
    }

    fn default_provenance(&self) -> Provenance {
        match self.kind {
            GraphKind::General => Provenance::General,
            _ => Provenance::Personal,
        }
    }

    /// Insert or update a triple. Returns true if it was not present before.
    pub fn insert(&mut self, triple: Triple, provenance: Provenance, tag: Option<&str>) -> bool {
        let id = triple.triple_id.clone();
        let is_new = match self.triples.get_mut(&id) {
            Some(existing) => {
                existing.provenance = existing.provenance.combine(provenance);
                false
            }
            None => {
                for entity in [&triple.subject, &triple.object] {
                    self.entity_index
                        .entry(entity.clone())
                        .or_default()
                        .insert(id.clone());
                }
                self.triples.insert(
                    id.clone(),
                    TripleRecord {
                        triple,
                        provenance,
                        tags: BTreeSet::new(),
                    },
                );
                true
            }
        };
        if let Some(tag) = tag {
            self.triples
                .get_mut(&id)
                .expect("just inserted")
                .tags
                .insert(tag.to_string());
        }
        is_new
    }

    fn insert_record(&mut self, record: TripleRecord) {
        let id = record.triple.triple_id.clone();
        let tags = record.tags.clone();
        self.insert(record.triple, record.provenance, None);
        self.triples
            .get_mut(&id)
            .expect("just inserted")
            .tags
            .extend(tags);
    }

    /// The entity index covers exactly the subjects and objects present.
    pub fn validate(&self) -> Result<(), String> {
        let mut expected: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in self.triples.values() {
            for e in [&r.triple.subject, &r.triple.object] {
                expected
                    .entry(e.clone())
                    .or_default()
                    .insert(r.triple.triple_id.clone());
            }
        }
        if expected != self.entity_index {
            return Err("entity index is out of sync with triples".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), KgError> {
        store::write_jsonl(path, self.triples.values().map(GraphLine::from))?;
        Ok(())
    }

    pub fn load(path: &Path, kind: GraphKind) -> Result<Self, KgError> {
        let lines: Vec<GraphLine> = store::read_jsonl(path)?;
        let mut graph = KnowledgeGraph::new(kind);
        for line in lines {
            let triple = Triple::new(&line.subject, &line.relation, &line.object)?;
            if triple.triple_id != line.triple_id {
                return Err(KgError::IdMismatch {
                    stored: line.triple_id,
                    computed: triple.triple_id,
                });
            }
            graph.insert_record(TripleRecord {
                triple,
                provenance: line.provenance,
                tags: line.tags,
            });
        }
        Ok(graph)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphLine {
    triple_id: String,
    subject: String,
    relation: String,
    object: String,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    tags: BTreeSet<String>,
}

impl From<&TripleRecord> for GraphLine {
    fn from(r: &TripleRecord) -> Self {
        GraphLine {
            triple_id: r.triple.triple_id.clone(),
            subject: r.triple.subject.clone(),
            relation: r.triple.relation.clone(),
            object: r.triple.object.clone(),
            provenance: r.provenance,
            tags: r.tags.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MappingName {
    /// triple -> corpus snippet
    M1,
    /// triple -> reasoning chain
    M2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingTable {
    name: MappingName,
    forward: BTreeMap<String, BTreeSet<String>>,
    reverse: BTreeMap<String, BTreeSet<String>>,
}

impl MappingTable {
    pub fn new(name: MappingName) -> Self {
        MappingTable {
            name,
            forward: BTreeMap::new(),
            reverse: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> MappingName {
        self.name
    }

    pub fn link(&mut self, triple_id: &str, target_id: &str) {
        self.forward
            .entry(triple_id.to_string())
            .or_default()
            .insert(target_id.to_string());
        self.reverse
            .entry(target_id.to_string())
            .or_default()
            .insert(triple_id.to_string());
    }

    pub fn targets(&self, triple_id: &str) -> Option<&BTreeSet<String>> {
        self.forward.get(triple_id)
    }

    pub fn triples_for(&self, target_id: &str) -> Option<&BTreeSet<String>> {
        self.reverse.get(target_id)
    }

    pub fn triple_count(&self) -> usize {
        self.forward.len()
    }

    pub fn target_count(&self) -> usize {
        self.reverse.len()
    }

    pub fn link_count(&self) -> usize {
        self.forward.values().map(BTreeSet::len).sum()
    }

    /// Forward and reverse are exact transposes.
    pub fn validate(&self) -> Result<(), String> {
        let mut transposed: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (t, ds) in &self.forward {
            for d in ds {
                transposed.entry(d.clone()).or_default().insert(t.clone());
            }
        }
        if transposed != self.reverse {
            return Err(format!("{:?} reverse map is not the transpose of forward", self.name));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), KgError> {
        store::write_jsonl(
            path,
            self.forward.iter().map(|(t, ds)| MappingLine {
                triple_id: t.clone(),
                target_ids: ds.iter().cloned().collect(),
            }),
        )?;
        Ok(())
    }

    /// Load the forward map and rebuild the reverse map.
    pub fn load(path: &Path, name: MappingName) -> Result<Self, KgError> {
        let lines: Vec<MappingLine> = store::read_jsonl(path)?;
        let mut table = MappingTable::new(name);
        for line in lines {
            for d in &line.target_ids {
                table.link(&line.triple_id, d);
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MappingLine {
    triple_id: String,
    target_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AddSummary {
    pub new_triples: usize,
    pub links: usize,
}

/// Add extracted `(triple, source_id)` pairs to a graph and its mapping.
///
/// All source ids are checked against `is_known_source` first; if any is
/// unknown nothing is added.
pub fn add_triples<F>(
    graph: &mut KnowledgeGraph,
    extracted: &[(Triple, String)],
    mapping: &mut MappingTable,
    is_known_source: F,
    tag: Option<&str>,
) -> Result<AddSummary, KgError>
where
    F: Fn(&str) -> bool,
{
    if let Some((t, source)) = extracted.iter().find(|(_, s)| !is_known_source(s)) {
        return Err(KgError::UnknownSource {
            source_id: source.clone(),
            subject: t.subject.clone(),
            relation: t.relation.clone(),
            object: t.object.clone(),
        });
    }
    let provenance = graph.default_provenance();
    let mut summary = AddSummary::default();
    for (triple, source) in extracted {
        mapping.link(&triple.triple_id, source);
        summary.links += 1;
        if graph.insert(triple.clone(), provenance, tag) {
            summary.new_triples += 1;
        }
    }
    Ok(summary)
}

/// Result of following a mapping from a set of triples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expansion {
    /// Target ids, sorted and deduplicated.
    pub targets: Vec<String>,
    /// For each target, the input triples that reached it.
    pub origins: BTreeMap<String, BTreeSet<String>>,
    /// Input triple ids absent from the mapping.
    pub unknown: Vec<String>,
}

pub fn expand_mapping<'a, I>(mapping: &MappingTable, triple_ids: I) -> Expansion
where
    I: IntoIterator<Item = &'a str>,
{
    let mut origins: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut unknown = BTreeSet::new();
    for t in triple_ids {
        match mapping.targets(t) {
            Some(ds) => {
                for d in ds {
                    origins.entry(d.clone()).or_default().insert(t.to_string());
                }
            }
            None => {
                unknown.insert(t.to_string());
            }
        }
    }
    Expansion {
        targets: origins.keys().cloned().collect(),
        origins,
        unknown: unknown.into_iter().collect(),
    }
}

/// Union of the general graph and personalized additions, with provenance.
pub fn merge_graphs(general: &KnowledgeGraph, personal: &KnowledgeGraph) -> KnowledgeGraph {
    let mut merged = KnowledgeGraph::new(GraphKind::Personalized);
    for r in general.records() {
        let mut r = r.clone();
        if general.kind() == GraphKind::General {
            r.provenance = Provenance::General;
        }
        merged.insert_record(r);
    }
    for r in personal.records() {
        let mut r = r.clone();
        r.provenance = match r.provenance {
            Provenance::General => Provenance::Personal,
            p => p,
        };
        merged.insert_record(r);
    }
    merged
}
