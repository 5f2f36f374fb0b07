//! Flat `key = value` text files shared by scenario and run configs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys and keys outside `allowed` are rejected.
pub fn parse(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
        })?;
        let key = key.trim();
        if !allowed.contains(&key) {
            return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
        }
    }
    Ok(out)
}

pub fn value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("bad value {raw:?} for {key}")))
}

pub fn list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|s| value(key, s.trim())).collect()
}
