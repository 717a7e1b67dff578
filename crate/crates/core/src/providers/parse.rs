//! The one parser every provider output passes through.
//!
//! Two grammars are accepted. Fact lists are one `subject | relation | object`
//! per line. Reasoning paths are `a→r1→b; b→r2→c` segments (`->` also works,
//! and segments may be split by newlines), or a JSON array of
//! `[subject, relation, object]` triples. Nothing here panics on arbitrary
//! input; malformed pieces become diagnostics.

use crate::kg::Triple;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parsed {
    pub triples: Vec<Triple>,
    pub diagnostics: Vec<String>,
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    let line = line
        .strip_prefix("- ")
        .or_else(|| line.strip_prefix("* "))
        .or_else(|| line.strip_prefix("• "))
        .unwrap_or(line);
    // "12. " or "3) "
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 && digits < line.len() {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return r.trim_start();
        }
    }
    line
}

/// Parse `S | R | O` lines. Lines without a `|` are ignored.
pub fn parse_triple_lines(raw: &str) -> Parsed {
    let mut out = Parsed::default();
    for (idx, line) in raw.lines().enumerate() {
        let line = strip_list_marker(line);
        if !line.contains('|') {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 3 {
            out.diagnostics.push(format!(
                "line {}: expected 3 `|`-separated fields, found {}",
                idx + 1,
                fields.len()
            ));
            continue;
        }
        match Triple::new(fields[0], fields[1], fields[2]) {
            Ok(t) => out.triples.push(t),
            Err(e) => out.diagnostics.push(format!("line {}: {e}", idx + 1)),
        }
    }
    if out.triples.is_empty() && !raw.trim().is_empty() {
        out.diagnostics
            .push("provider output contained no parseable triples".to_string());
    }
    out
}

fn parse_json_path(raw: &str) -> Option<Parsed> {
    let rows: Vec<Vec<String>> = serde_json::from_str(raw).ok()?;
    let mut out = Parsed::default();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != 3 {
            out.diagnostics
                .push(format!("item {}: expected 3 elements, found {}", i + 1, row.len()));
            continue;
        }
        match Triple::new(&row[0], &row[1], &row[2]) {
            Ok(t) => out.triples.push(t),
            Err(e) => out.diagnostics.push(format!("item {}: {e}", i + 1)),
        }
    }
    Some(out)
}

/// Parse a multi-hop reasoning path into ordered triples.
pub fn parse_reasoning_path(raw: &str) -> Parsed {
    let trimmed = raw.trim();
    if trimmed.starts_with('[') {
        if let Some(parsed) = parse_json_path(trimmed) {
            return parsed;
        }
    }
    let mut out = Parsed::default();
    let normalized = raw.replace("->", "→");
    for (idx, segment) in normalized
        .split(['\n', ';', '；'])
        .map(strip_list_marker)
        .enumerate()
    {
        if !segment.contains('→') {
            continue;
        }
        let parts: Vec<&str> = segment.split('→').collect();
        if parts.len() < 3 || parts.len().is_multiple_of(2) {
            out.diagnostics.push(format!(
                "segment {}: a path needs entity→relation→entity hops, found {} parts",
                idx + 1,
                parts.len()
            ));
            continue;
        }
        for hop in (0..parts.len() - 2).step_by(2) {
            match Triple::new(parts[hop], parts[hop + 1], parts[hop + 2]) {
                Ok(t) => out.triples.push(t),
                Err(e) => out.diagnostics.push(format!("segment {}: {e}", idx + 1)),
            }
        }
    }
    out
}

/// Render triples in the JSON form accepted by [`parse_reasoning_path`].
pub fn serialize_path(triples: &[Triple]) -> String {
    let rows: Vec<[&str; 3]> = triples.iter().map(Triple::as_parts).collect();
    serde_json::to_string(&rows).expect("string arrays serialize")
}

/// Likert judgement: the first integer in the output, clamped to 0..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LikertScore {
    pub score: u8,
    pub clamped: bool,
}

pub fn parse_likert(raw: &str) -> Result<LikertScore, String> {
    let bytes = raw.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let negative = i > 0 && bytes[i - 1] == b'-';
            let end = bytes[i..]
                .iter()
                .position(|b| !b.is_ascii_digit())
                .map_or(bytes.len(), |p| i + p);
            // saturate absurdly long digit runs instead of overflowing
            let value: i64 = raw[i..end].parse().unwrap_or(i64::MAX);
            let value = if negative { -value } else { value };
            let score = value.clamp(0, 5) as u8;
            return Ok(LikertScore {
                score,
                clamped: value != i64::from(score),
            });
        }
        i += 1;
    }
    Err(format!("no integer score in judge output {:?}", truncate(raw, 80)))
}

fn truncate(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parts(p: &Parsed) -> Vec<[String; 3]> {
        p.triples
            .iter()
            .map(|t| [t.subject.clone(), t.relation.clone(), t.object.clone()])
            .collect()
    }

    fn row(s: &str, r: &str, o: &str) -> [String; 3] {
        [s.into(), r.into(), o.into()]
    }

    #[test]
    fn single_marked_line() {
        let p = parse_triple_lines("甲 | 治疗 | 乙");
        assert_eq!(parts(&p), vec![row("甲", "治疗", "乙")]);
        assert!(p.diagnostics.is_empty());
    }

    #[test]
    fn marked_lines_keep_order_among_prose() {
        let raw = "intro text\nA | r1 | B\n- C | r2 | D\nmore prose\n3. E | r3 | F\n";
        let p = parse_triple_lines(raw);
        assert_eq!(
            parts(&p),
            vec![row("A", "r1", "B"), row("C", "r2", "D"), row("E", "r3", "F")]
        );
    }

    #[test]
    fn no_marked_lines_gives_empty_with_warning() {
        let p = parse_triple_lines("just prose");
        assert!(p.triples.is_empty());
        assert_eq!(p.diagnostics.len(), 1);
        assert!(parse_triple_lines("").diagnostics.is_empty());
    }

    #[test]
    fn bad_field_counts_are_diagnosed() {
        let p = parse_triple_lines("a | b\na | | c\nx | y | z");
        assert_eq!(parts(&p), vec![row("x", "y", "z")]);
        assert_eq!(p.diagnostics.len(), 2);
    }

    #[test]
    fn reasoning_path_segments() {
        let p = parse_reasoning_path("a→r1→b; b→r2→c");
        assert_eq!(parts(&p), vec![row("a", "r1", "b"), row("b", "r2", "c")]);
        let p = parse_reasoning_path("a -> r1 -> b -> r2 -> c");
        assert_eq!(parts(&p), vec![row("a", "r1", "b"), row("b", "r2", "c")]);
        assert!(parse_reasoning_path("what is the cause of cough?").triples.is_empty());
        let p = parse_reasoning_path("a→r→");
        assert!(p.triples.is_empty());
        assert!(!p.diagnostics.is_empty());
    }

    #[test]
    fn json_path_round_trips() {
        let ts = vec![
            Triple::new("a;b", "r→1", "c").unwrap(),
            Triple::new("\"q\"", "r", "[x]").unwrap(),
        ];
        let p = parse_reasoning_path(&serialize_path(&ts));
        assert_eq!(p.triples, ts);
    }

    #[test]
    fn likert_parsing_and_clamping() {
        assert_eq!(parse_likert("4").unwrap(), LikertScore { score: 4, clamped: false });
        assert_eq!(parse_likert("Score: 7/5").unwrap(), LikertScore { score: 5, clamped: true });
        assert_eq!(parse_likert("-2").unwrap(), LikertScore { score: 0, clamped: true });
        assert_eq!(
            parse_likert("99999999999999999999999").unwrap(),
            LikertScore { score: 5, clamped: true }
        );
        assert!(parse_likert("excellent").is_err());
    }
}
