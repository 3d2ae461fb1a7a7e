//! Flat `key = value` configuration files.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored.
//! Keys may repeat only if the consumer allows it (later entries win).

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parsed entries plus the source name used in error messages.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    pub source: String,
    pub entries: Vec<Entry>,
}

impl KeyValues {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    message: format!("expected `key = value`, found `{line}`"),
                });
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            entries.push(Entry {
                key: key.to_string(),
                value: v.trim().to_string(),
                line: i + 1,
            });
        }
        Ok(KeyValues {
            source: source.to_string(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn error(&self, e: &Entry, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.source.clone(),
            line: e.line,
            message: message.into(),
        }
    }

    /// Parses `e.value` as `T`, attributing failures to the entry's line.
    pub fn value<T>(&self, e: &Entry) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        e.value
            .parse()
            .map_err(|err| self.error(e, format!("bad value for `{}`: {err}", e.key)))
    }
}

/// Comma-separated list, empty items dropped.
pub fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}
