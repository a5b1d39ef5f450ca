//! Flat `key = value` experiment files.
//!
//! Keys carry a section prefix (`model.`, `train.`, `data.`). Blank lines and
//! lines starting with `#` are ignored. Later assignments override earlier
//! ones, which is how `--set` overrides layer on top of a file. An override
//! may omit the prefix when the bare name is unambiguous (`heads=1`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const SECTIONS: [&str; 3] = ["model", "train", "data"];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            kv.set(key, v.trim());
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Applies a `key=value` override. Unprefixed keys are resolved against
    /// the known `schema` keys and must match exactly one section.
    pub fn apply_override(&mut self, assignment: &str, schema: &[&str]) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let key = k.trim();
        let full = if key.contains('.') {
            key.to_string()
        } else {
            let hits: Vec<&&str> = schema
                .iter()
                .filter(|s| s.split_once('.').map(|(_, b)| b) == Some(key))
                .collect();
            match hits.as_slice() {
                [one] => one.to_string(),
                [] => return Err(Error::Config(format!("unknown key '{key}'"))),
                _ => return Err(Error::Config(format!("key '{key}' is ambiguous; add a section prefix"))),
            }
        };
        self.set(&full, v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn parse_opt<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<V>()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {raw}: {e}"))),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => match raw.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(Some(true)),
                "false" | "no" | "off" | "0" => Ok(Some(false)),
                _ => Err(Error::Config(format!("{key} = {raw}: expected a boolean"))),
            },
        }
    }

    /// Keys in this set that `schema` does not know.
    pub fn unknown_keys(&self, schema: &[&str]) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| !schema.contains(&k.as_str()))
            .cloned()
            .collect()
    }

    /// Entries whose key starts with `prefix.`.
    pub fn section(&self, prefix: &str) -> KeyValues {
        let p = format!("{prefix}.");
        KeyValues {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(&p))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }
}

/// Canonical text: one `key = value` line per entry, keys sorted.
impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
