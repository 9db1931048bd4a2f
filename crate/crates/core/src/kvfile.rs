//! Line-oriented `key = value` text files.
//!
//! Used for run configs, dataset manifests, checkpoint manifests, and
//! metrics logs. Keys may repeat (record lists); `#` starts a comment.
//! Parse errors carry line numbers.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: key `{key}`: {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("unknown key `{key}` (line {line})")]
    UnknownKey { key: String, line: usize },
    #[error("missing required key `{0}`")]
    MissingKey(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parse the whole document into ordered entries.
pub fn parse(text: &str) -> Result<Vec<KvEntry>, KvError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(KvError::Malformed {
                line,
                text: trimmed.to_string(),
            });
        };
        out.push(KvEntry {
            line,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn parse_usize(e: &KvEntry) -> Result<usize, KvError> {
    e.value
        .parse()
        .map_err(|_| bad(e, "expected a non-negative integer"))
}

pub fn parse_u64(e: &KvEntry) -> Result<u64, KvError> {
    e.value
        .parse()
        .map_err(|_| bad(e, "expected a non-negative integer"))
}

pub fn parse_f64(e: &KvEntry) -> Result<f64, KvError> {
    e.value.parse().map_err(|_| bad(e, "expected a number"))
}

pub fn parse_bool(e: &KvEntry) -> Result<bool, KvError> {
    match e.value.as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad(e, "expected true/false")),
    }
}

/// Comma-separated list of integers; empty string means empty list.
pub fn parse_usize_list(e: &KvEntry) -> Result<Vec<usize>, KvError> {
    if e.value.is_empty() || e.value == "none" {
        return Ok(Vec::new());
    }
    e.value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| bad(e, "expected a comma-separated integer list"))
        })
        .collect()
}

fn bad(e: &KvEntry, msg: &str) -> KvError {
    KvError::BadValue {
        line: e.line,
        key: e.key.clone(),
        msg: msg.to_string(),
    }
}

/// Deterministic writer; keys appear in insertion order.
#[derive(Default)]
pub struct KvWriter {
    buf: String,
}

impl KvWriter {
    pub fn new() -> Self {
        KvWriter { buf: String::new() }
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        let _ = writeln!(self.buf, "# {text}");
        self
    }

    pub fn blank(&mut self) -> &mut Self {
        self.buf.push('\n');
        self
    }

    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.buf, "{key} = {value}");
        self
    }

    pub fn put_list(&mut self, key: &str, values: &[usize]) -> &mut Self {
        let joined = values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(self.buf, "{key} = {joined}");
        self
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_pairs() {
        let doc = "# header\n\nalpha = 1\n  beta=two words  \n";
        let entries = parse(doc).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].key, "alpha");
        assert_eq!(entries[1].value, "two words");
        assert_eq!(entries[1].line, 4);
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse("ok = 1\nnot a pair\n").unwrap_err();
        assert!(matches!(err, KvError::Malformed { line: 2, .. }));
    }

    #[test]
    fn list_parsing() {
        let e = KvEntry {
            line: 1,
            key: "k".into(),
            value: "2,3,4".into(),
        };
        assert_eq!(parse_usize_list(&e).unwrap(), vec![2, 3, 4]);
        let none = KvEntry {
            line: 1,
            key: "k".into(),
            value: "none".into(),
        };
        assert_eq!(parse_usize_list(&none).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn writer_roundtrip() {
        let mut w = KvWriter::new();
        w.comment("demo").put("a", 1).put_list("xs", &[5, 6]);
        let text = w.finish();
        let entries = parse(&text).unwrap();
        assert_eq!(entries[0].value, "1");
        assert_eq!(entries[1].value, "5,6");
    }
}
