//! Flat `key = value` text: one entry per line, `#` starts a comment, keys
//! are dotted (`train.lr`). Values are taken verbatim after trimming.

use std::path::Path;

use crate::error::{Error, Result};

/// Line number used in diagnostics for entries given as command-line overrides.
pub const OVERRIDE_LINE: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigDoc {
    entries: Vec<Entry>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.split('.').all(|part| {
            !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        })
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = ConfigDoc::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::Config { line, key: body.to_string(), msg: "expected `key = value`".into() });
            };
            doc.insert(line, key.trim(), value.trim())?;
        }
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn insert(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        if !valid_key(key) {
            return Err(Error::Config { line, key: key.into(), msg: "invalid key".into() });
        }
        if let Some(prev) = self.entries.iter().find(|e| e.key == key) {
            return Err(Error::Config {
                line,
                key: key.into(),
                msg: format!("duplicate key (first set on line {})", prev.line),
            });
        }
        self.entries.push(Entry { line, key: key.into(), value: value.into() });
        Ok(())
    }

    /// Applies a `key=value` override, replacing any existing entry.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let Some((key, value)) = spec.split_once('=') else {
            return Err(Error::Config {
                line: OVERRIDE_LINE,
                key: spec.into(),
                msg: "override must look like key=value".into(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        self.entries.retain(|e| e.key != key);
        self.insert(OVERRIDE_LINE, key, value)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn error(&self, key: &str, msg: impl Into<String>) -> Error {
        let line = self.get(key).map_or(OVERRIDE_LINE, |e| e.line);
        Error::Config { line, key: key.into(), msg: msg.into() }
    }

    /// Parses the value of `key` if present.
    pub fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| Error::Config {
                line: e.line,
                key: key.into(),
                msg: format!("cannot parse `{}`", e.value),
            }),
        }
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.parse_opt(key)?.ok_or_else(|| self.error(key, "missing required key"))
    }

    /// Comma-separated list of floats.
    pub fn float_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(e) = self.get(key) else { return Ok(None) };
        e.value
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|_| Error::Config {
                line: e.line,
                key: key.into(),
                msg: format!("expected comma-separated numbers, got `{}`", e.value),
            })
    }

    /// Rejects keys outside `known` and outside the `ignored_prefix` namespace.
    pub fn check_known(&self, known: &[&str], ignored_prefix: &str) -> Result<()> {
        for e in &self.entries {
            if !known.contains(&e.key.as_str()) && !e.key.starts_with(ignored_prefix) {
                return Err(Error::Config { line: e.line, key: e.key.clone(), msg: "unknown key".into() });
            }
        }
        Ok(())
    }
}
