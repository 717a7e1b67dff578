//! Prompt templates with `{question}`, `{answer}`, `{contexts}`, `{triples}`
//! and `{text}` placeholders.
//!
//! The `v1` set ships in `prompts/v1/` and is compiled in as the default; a
//! directory with any subset of the same file names overrides it at runtime.

use std::path::Path;

use crate::corpus::TextUnit;
use crate::kg::Triple;

use super::ProviderError;

pub const DEFAULT_VERSION: &str = "v1";

const PLACEHOLDERS: [&str; 5] = ["question", "answer", "contexts", "triples", "text"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub version: String,
    pub extract: String,
    pub decompose: String,
    pub reason: String,
    pub cot: String,
    pub answer: String,
    pub judge: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            version: DEFAULT_VERSION.to_string(),
            extract: include_str!("../../prompts/v1/extract.txt").to_string(),
            decompose: include_str!("../../prompts/v1/decompose.txt").to_string(),
            reason: include_str!("../../prompts/v1/reason.txt").to_string(),
            cot: include_str!("../../prompts/v1/cot.txt").to_string(),
            answer: include_str!("../../prompts/v1/answer.txt").to_string(),
            judge: include_str!("../../prompts/v1/judge.txt").to_string(),
        }
    }
}

impl PromptSet {
    /// Defaults, overridden by whichever `<name>.txt` files exist in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, ProviderError> {
        let mut set = PromptSet {
            version: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "custom".to_string()),
            ..PromptSet::default()
        };
        for (name, slot) in [
            ("extract", &mut set.extract),
            ("decompose", &mut set.decompose),
            ("reason", &mut set.reason),
            ("cot", &mut set.cot),
            ("answer", &mut set.answer),
            ("judge", &mut set.judge),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|e| {
                    ProviderError::Config(format!("cannot read prompt {}: {e}", path.display()))
                })?;
            }
        }
        Ok(set)
    }
}

/// Values substituted into a template. Unset placeholders render empty.
#[derive(Debug, Default, Clone, Copy)]
pub struct Fill<'a> {
    pub question: &'a str,
    pub answer: &'a str,
    pub contexts: &'a str,
    pub triples: &'a str,
    pub text: &'a str,
}

/// Substitute placeholders in one left-to-right pass; substituted values are
/// never re-scanned, and unknown `{...}` sequences are kept verbatim.
pub fn render(template: &str, fill: &Fill<'_>) -> String {
    let mut out = String::with_capacity(template.len() + fill.text.len() + fill.contexts.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let matched = PLACEHOLDERS.iter().find(|name| {
            after.starts_with(**name) && after[name.len()..].starts_with('}')
        });
        match matched {
            Some(name) => {
                out.push_str(match *name {
                    "question" => fill.question,
                    "answer" => fill.answer,
                    "contexts" => fill.contexts,
                    "triples" => fill.triples,
                    _ => fill.text,
                });
                rest = &after[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// `[id]` header followed by the text, blocks separated by blank lines.
pub fn render_contexts(contexts: &[TextUnit]) -> String {
    contexts
        .iter()
        .map(|c| format!("[{}]\n{}", c.id, c.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn render_triple_list(triples: &[Triple]) -> String {
    triples
        .iter()
        .map(|t| format!("({}, {}, {})", t.subject, t.relation, t.object))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pass_substitution() {
        let fill = Fill {
            question: "q {answer}",
            answer: "A",
            ..Fill::default()
        };
        assert_eq!(render("{question}|{answer}|{unknown}|{", &fill), "q {answer}|A|{unknown}|{");
    }

    #[test]
    fn default_templates_carry_their_placeholders() {
        let p = PromptSet::default();
        assert!(p.extract.contains("{text}"));
        assert!(p.reason.contains("{contexts}") && p.reason.contains("{answer}"));
        assert!(p.answer.contains("Reasoning path:\n{triples}"));
        assert!(p.answer.contains("Text source:\n{contexts}"));
        assert!(p.cot.contains("{question}"));
    }

    #[test]
    fn directory_overrides_subset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cot.txt"), "PATH {question}").unwrap();
        let p = PromptSet::load_dir(dir.path()).unwrap();
        assert_eq!(p.cot, "PATH {question}");
        assert_eq!(p.answer, PromptSet::default().answer);
    }
}
