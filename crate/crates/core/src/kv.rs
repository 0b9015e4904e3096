//! Flat `key = value` text, one pair per line. `#` starts a comment.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(Error::config(format!(
                "line {line}: expected `key = value`"
            )));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {line}: empty key")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::config(format!(
                "line {line}: `{key}` already set on line {}",
                prev.line
            )));
        }
        out.push(Entry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn value<T: std::str::FromStr>(e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| {
        Error::config(format!(
            "line {}: bad value `{}` for `{}`",
            e.line, e.value, e.key
        ))
    })
}

pub fn list<T: std::str::FromStr>(e: &Entry) -> Result<Vec<T>> {
    if e.value.is_empty() {
        return Ok(Vec::new());
    }
    e.value
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| {
                Error::config(format!(
                    "line {}: bad list item `{}` for `{}`",
                    e.line,
                    s.trim(),
                    e.key
                ))
            })
        })
        .collect()
}

pub fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
