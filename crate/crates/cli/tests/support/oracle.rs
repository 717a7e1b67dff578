//! Straight-line re-derivation of the mock pipeline.
//!
//! Written from the documented behaviour of the mock providers and the
//! retrieval rules, with only std, serde_json and xxhash. Nothing here calls
//! into the library, so agreement with it is evidence rather than tautology.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde_json::{json, Value};
use xxhash_rust::xxh3::{xxh3_128, xxh3_64};

pub const DIMS: usize = 256;
pub const BUDGET: usize = 32_000;

pub fn id_of(prefix: &str, v: &Value) -> String {
    format!("{prefix}-{:032x}", xxh3_128(&serde_json::to_vec(v).unwrap()))
}

pub fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hashed 2- and 3-gram counts within whitespace tokens, unit length.
pub fn embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; DIMS];
    for tok in text.split_whitespace() {
        let cs: Vec<char> = tok.chars().collect();
        for n in 2..=3 {
            if cs.len() < n {
                continue;
            }
            for i in 0..=cs.len() - n {
                let gram: String = cs[i..i + n].iter().collect();
                v[(xxh3_64(gram.as_bytes()) % DIMS as u64) as usize] += 1.0;
            }
        }
    }
    let n = norm(&v);
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub id: String,
    pub score: f64,
}

impl Scored {
    pub fn value(&self) -> Value {
        json!({ "item_id": self.id, "score": self.score })
    }
}

pub fn scored_values(hits: &[Scored]) -> Value {
    Value::Array(hits.iter().map(Scored::value).collect())
}

fn by_rank(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

/// Brute-force cosine ranking over f32-rounded vectors; zero vectors excluded.
pub struct Index {
    rows: Vec<(String, Vec<f64>, f64)>,
}

impl Index {
    pub fn from_vectors(rows: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        let rows = rows
            .into_iter()
            .map(|(id, v)| {
                let v: Vec<f64> = v.into_iter().map(|x| x as f32 as f64).collect();
                let n = norm(&v);
                (id, v, n)
            })
            .filter(|r| r.2 > 0.0)
            .collect();
        Index { rows }
    }

    pub fn from_texts(units: impl IntoIterator<Item = (String, String)>) -> Self {
        Index::from_vectors(units.into_iter().map(|(id, t)| (id, embed(&t))))
    }

    pub fn top(&self, q: &[f64], k: usize) -> Vec<Scored> {
        let qn = norm(q);
        let mut all: Vec<Scored> = self
            .rows
            .iter()
            .map(|(id, v, n)| Scored {
                id: id.clone(),
                score: (dot(q, v) / (qn * n)).clamp(-1.0, 1.0),
            })
            .collect();
        all.sort_by(by_rank);
        all.truncate(k);
        all
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fact {
    pub id: String,
    pub s: String,
    pub r: String,
    pub o: String,
}

impl Fact {
    pub fn new(s: &str, r: &str, o: &str) -> Option<Fact> {
        let (s, r, o) = (squash(s), squash(r), squash(o));
        if s.is_empty() || r.is_empty() || o.is_empty() {
            return None;
        }
        Some(Fact {
            id: id_of("t", &json!(["triple", s, r, o])),
            s,
            r,
            o,
        })
    }

    pub fn text(&self) -> String {
        format!("{} {} {}", self.s, self.r, self.o)
    }

    pub fn value(&self) -> Value {
        json!({ "triple_id": self.id, "subject": self.s, "relation": self.r, "object": self.o })
    }
}

/// `S | R | O` lines.
pub fn fact_lines(raw: &str) -> Vec<Fact> {
    raw.lines()
        .filter(|l| l.contains('|'))
        .filter_map(|l| {
            let f: Vec<&str> = l.split('|').collect();
            if f.len() == 3 {
                Fact::new(f[0], f[1], f[2])
            } else {
                None
            }
        })
        .collect()
}

/// `a→r→b→r→c` segments.
pub fn path_facts(raw: &str) -> Vec<Fact> {
    let raw = raw.replace("->", "→");
    let mut out = Vec::new();
    for seg in raw.split(['\n', ';', '；']) {
        let parts: Vec<&str> = seg.split('→').collect();
        if parts.len() < 3 || parts.len().is_multiple_of(2) {
            continue;
        }
        let mut i = 0;
        while i + 2 < parts.len() {
            out.extend(Fact::new(parts[i], parts[i + 1], parts[i + 2]));
            i += 2;
        }
    }
    out
}

fn facts_value(fs: &[Fact]) -> Value {
    Value::Array(fs.iter().map(Fact::value).collect())
}

#[derive(Debug, Clone)]
pub struct Doc {
    pub id: String,
    pub book: String,
    pub heading: Vec<String>,
    pub text: String,
    pub rendered: String,
}

pub fn doc(book: &str, heading: &[&str], text: &str) -> Doc {
    let heading: Vec<String> = heading.iter().map(|s| s.to_string()).collect();
    Doc {
        id: id_of("s", &json!(["snippet", heading, text])),
        book: book.to_string(),
        rendered: format!("{}\n{}", heading.join(" > "), text),
        heading,
        text: text.to_string(),
    }
}

pub fn docs_from_jsonl(raw: &str) -> Vec<Doc> {
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let heading: Vec<&str> = v["heading_path"]
                .as_array()
                .unwrap()
                .iter()
                .map(|h| h.as_str().unwrap())
                .collect();
            doc(v["book_id"].as_str().unwrap(), &heading, v["text"].as_str().unwrap())
        })
        .collect()
}

pub struct General {
    pub docs: BTreeMap<String, Doc>,
    pub facts: BTreeMap<String, Fact>,
    pub m1: BTreeMap<String, BTreeSet<String>>,
    pub fact_index: Index,
    pub doc_index: Index,
}

pub fn general(docs: &[Doc]) -> General {
    let mut facts = BTreeMap::new();
    let mut m1: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for d in docs {
        for f in fact_lines(&d.text) {
            m1.entry(f.id.clone()).or_default().insert(d.id.clone());
            facts.insert(f.id.clone(), f);
        }
    }
    let fact_index = Index::from_texts(facts.values().map(|f| (f.id.clone(), f.text())));
    let doc_index = Index::from_texts(docs.iter().map(|d| (d.id.clone(), d.rendered.clone())));
    General {
        docs: docs.iter().map(|d| (d.id.clone(), d.clone())).collect(),
        facts,
        m1,
        fact_index,
        doc_index,
    }
}

pub struct Case {
    pub qa_id: String,
    pub question: String,
    pub answer: String,
    pub tag: String,
}

pub struct Chain {
    pub id: String,
    pub qa_id: String,
    pub text: String,
    pub contexts: Vec<String>,
}

pub struct Personal {
    /// One object per case with every intermediate.
    pub traces: Vec<Value>,
    pub additions: BTreeMap<String, (Fact, BTreeSet<String>)>,
    pub m2: BTreeMap<String, BTreeSet<String>>,
    pub chains: BTreeMap<String, Chain>,
    pub merged: BTreeMap<String, Fact>,
    pub index: Index,
}

impl Personal {
    pub fn additions_value(&self) -> Value {
        Value::Array(
            self.additions
                .values()
                .map(|(f, tags)| {
                    let mut v = f.value();
                    v["tags"] = json!(tags);
                    v
                })
                .collect(),
        )
    }

    pub fn m2_value(&self) -> Value {
        json!(self.m2)
    }
}

pub fn personalize(g: &General, cases: &[Case], k: usize) -> Personal {
    let mut traces = Vec::new();
    let mut additions: BTreeMap<String, (Fact, BTreeSet<String>)> = BTreeMap::new();
    let mut m2: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut chains = BTreeMap::new();
    for c in cases {
        let g_query = fact_lines(&format!("{}\n{}", c.question, c.answer));
        let g_recall = if g_query.is_empty() {
            Vec::new()
        } else {
            let joined: Vec<String> = g_query.iter().map(Fact::text).collect();
            g.fact_index.top(&embed(&joined.join("\n")), k)
        };
        let d_tuple: BTreeSet<String> = g_recall
            .iter()
            .filter_map(|h| g.m1.get(&h.id))
            .flatten()
            .cloned()
            .collect();
        let d_snippets = g.doc_index.top(&embed(&c.question), k);
        let mut contexts: Vec<String> = Vec::new();
        for id in d_snippets.iter().map(|h| &h.id).chain(d_tuple.iter()) {
            if !contexts.contains(id) {
                contexts.push(id.clone());
            }
        }
        let mut listed = contexts.clone();
        listed.sort();
        let text = format!("Q:{}\nA:{}\nCTX:{}", c.question, c.answer, listed.join(","));
        let chain_id = id_of("c", &json!({ "qa_id": c.qa_id, "text": text }));
        let mut added: Vec<Fact> = Vec::new();
        for f in fact_lines(&text) {
            if !added.iter().any(|a| a.id == f.id) {
                added.push(f);
            }
        }
        for f in &added {
            m2.entry(f.id.clone()).or_default().insert(chain_id.clone());
            additions
                .entry(f.id.clone())
                .or_insert_with(|| (f.clone(), BTreeSet::new()))
                .1
                .insert(c.tag.clone());
        }
        traces.push(json!({
            "qa_id": c.qa_id,
            "g_query": facts_value(&g_query),
            "g_recall": scored_values(&g_recall),
            "d_tuple": d_tuple,
            "d_snippets": scored_values(&d_snippets),
            "contexts": contexts,
            "chain_id": chain_id,
            "chain_text": text,
            "additions": added.iter().map(|f| f.id.clone()).collect::<Vec<_>>(),
        }));
        chains.insert(
            chain_id.clone(),
            Chain {
                id: chain_id,
                qa_id: c.qa_id.clone(),
                text,
                contexts,
            },
        );
    }
    let mut merged = g.facts.clone();
    for (id, (f, _)) in &additions {
        merged.insert(id.clone(), f.clone());
    }
    let index = Index::from_texts(merged.values().map(|f| (f.id.clone(), f.text())));
    Personal {
        traces,
        additions,
        m2,
        chains,
        merged,
        index,
    }
}

/// Drop lowest scores first (larger id first on ties) until the text fits.
fn budget(items: &[(String, usize, f64)]) -> BTreeSet<usize> {
    let mut total: usize = items.iter().map(|i| i.1).sum();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].2.total_cmp(&items[b].2).then_with(|| items[b].0.cmp(&items[a].0)));
    let mut dropped = BTreeSet::new();
    for i in order {
        if total <= BUDGET {
            break;
        }
        total -= items[i].1;
        dropped.insert(i);
    }
    dropped
}

pub fn answer_template() -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/prompts/v1/answer.txt");
    std::fs::read_to_string(path).unwrap()
}

fn fill(template: &str, question: &str, facts: &[&Fact], units: &[(String, String)]) -> String {
    let triples: Vec<String> = facts.iter().map(|f| format!("({}, {}, {})", f.s, f.r, f.o)).collect();
    let blocks: Vec<String> = units.iter().map(|(id, t)| format!("[{id}]\n{t}")).collect();
    template
        .replace("{question}", question)
        .replace("{triples}", &triples.join("\n"))
        .replace("{contexts}", &blocks.join("\n\n"))
}

fn mock_answer(question: &str, facts: &[&Fact], units: &[(String, String)]) -> String {
    let path: Vec<String> = facts.iter().map(|f| f.text()).collect();
    let mut ids: Vec<&str> = units.iter().map(|u| u.0.as_str()).collect();
    ids.sort();
    ids.dedup();
    format!("Q:{question}\nPATH:{}\nSRC:{}", path.join("; "), ids.join(","))
}

/// Personalized answer: path, triple recall, chain expansion, prompt.
pub fn answer(p: &Personal, question: &str, cot_reply: Option<&str>, template: &str, k: usize) -> Value {
    let mut steps = path_facts(cot_reply.unwrap_or(question));
    if steps.is_empty() {
        steps = vec![Fact::new(question, "relates_to", question).unwrap()];
    }
    let joined: Vec<String> = steps.iter().map(Fact::text).collect();
    let hits = p.index.top(&embed(&joined.join("\n")), k);
    let mut reached: BTreeMap<&str, (f64, BTreeSet<&str>)> = BTreeMap::new();
    for h in &hits {
        for c in p.m2.get(&h.id).into_iter().flatten() {
            let e = reached.entry(c).or_insert((f64::NEG_INFINITY, BTreeSet::new()));
            e.0 = e.0.max(h.score);
            e.1.insert(&h.id);
        }
    }
    let mut chains: Vec<(&str, f64, Vec<&str>)> = reached
        .into_iter()
        .map(|(c, (s, via))| (c, s, via.into_iter().collect()))
        .collect();
    chains.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let items: Vec<(String, usize, f64)> = chains
        .iter()
        .map(|(c, s, _)| (c.to_string(), p.chains[*c].text.chars().count(), *s))
        .collect();
    let dropped = budget(&items);
    let kept: Vec<&(&str, f64, Vec<&str>)> = chains
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, c)| c)
        .collect();
    let facts: Vec<&Fact> = hits.iter().map(|h| &p.merged[&h.id]).collect();
    let units: Vec<(String, String)> = kept
        .iter()
        .map(|(c, _, _)| (c.to_string(), p.chains[*c].text.clone()))
        .collect();
    json!({
        "t_query": facts_value(&steps),
        "t_recall": scored_values(&hits),
        "c_tuple": kept
            .iter()
            .map(|(c, s, via)| json!({ "chain_id": c, "score": s, "via": via }))
            .collect::<Vec<_>>(),
        "prompt": fill(template, question, &facts, &units),
        "answer": mock_answer(question, &facts, &units),
    })
}

/// Integrated baseline: micro triples expanded through M1, unioned with
/// macro snippet hits.
pub fn integrated(g: &General, question: &str, template: &str, k: usize) -> Value {
    let q = embed(question);
    let triple_hits = g.fact_index.top(&q, k);
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for h in &triple_hits {
        for d in g.m1.get(&h.id).into_iter().flatten() {
            let e = best.entry(d.clone()).or_insert(f64::NEG_INFINITY);
            *e = e.max(h.score);
        }
    }
    for h in g.doc_index.top(&q, k) {
        let e = best.entry(h.id).or_insert(f64::NEG_INFINITY);
        *e = e.max(h.score);
    }
    let mut hits: Vec<Scored> = best.into_iter().map(|(id, score)| Scored { id, score }).collect();
    hits.sort_by(by_rank);
    let items: Vec<(String, usize, f64)> = hits
        .iter()
        .map(|h| (h.id.clone(), g.docs[&h.id].rendered.chars().count(), h.score))
        .collect();
    let dropped = budget(&items);
    let units: Vec<(String, String)> = hits
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, h)| (h.id.clone(), g.docs[&h.id].rendered.clone()))
        .collect();
    let facts: Vec<&Fact> = triple_hits.iter().map(|h| &g.facts[&h.id]).collect();
    json!({
        "hits": scored_values(&hits),
        "triple_hits": scored_values(&triple_hits),
        "prompt": fill(template, question, &facts, &units),
        "answer": mock_answer(question, &facts, &units),
    })
}
