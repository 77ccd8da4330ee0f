//! Line-oriented `key = value` text files. `#` starts a comment; blank lines
//! are ignored. Keys may repeat; interpretation is up to the caller.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str, path: &Path) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(parse_error(
                path,
                i + 1,
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(parse_error(path, i + 1, "empty key"));
        }
        out.push(Entry {
            line: i + 1,
            key: key.to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        msg: msg.into(),
    }
}

/// Parses a value with `FromStr`, attaching the entry's position on failure.
pub fn value<T: std::str::FromStr>(e: &Entry, path: &Path) -> Result<T> {
    e.value.parse().map_err(|_| {
        parse_error(
            path,
            e.line,
            format!("cannot parse `{}` for key `{}`", e.value, e.key),
        )
    })
}

/// Whitespace- or comma-separated numbers.
pub fn numbers(e: &Entry, path: &Path) -> Result<Vec<f64>> {
    e.value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(path, e.line, format!("`{s}` is not a finite number")))
        })
        .collect()
}
