//! Flat `key = value` configuration documents.
//!
//! One entry per line, `#` starts a comment. `include <path>` splices another
//! document in place (paths resolve relative to the including file) and
//! `include <path> as <prefix>` prefixes every included key with `<prefix>.`.
//! Later assignments override earlier ones.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
    /// Verbatim text of every file that contributed, in load order.
    sources: Vec<(String, String)>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses a document without include support.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        cfg.sources.push(("<inline>".into(), text.to_string()));
        cfg.absorb(text, "<inline>", None, "", &mut Vec::new())?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::new();
        cfg.load_file(path, "", &mut Vec::new())?;
        Ok(cfg)
    }

    fn load_file(&mut self, path: &Path, prefix: &str, stack: &mut Vec<PathBuf>) -> Result<()> {
        let canon = path.canonicalize().map_err(|e| Error::io(path, e))?;
        if stack.contains(&canon) {
            return Err(Error::Config(format!("include cycle through {}", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.sources.push((path.display().to_string(), text.clone()));
        stack.push(canon);
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let name = path.display().to_string();
        self.absorb(&text, &name, Some(&dir), prefix, stack)?;
        stack.pop();
        Ok(())
    }

    fn absorb(
        &mut self,
        text: &str,
        name: &str,
        dir: Option<&Path>,
        prefix: &str,
        stack: &mut Vec<PathBuf>,
    ) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("include ") {
                let dir = dir.ok_or_else(|| {
                    Error::Config(format!("{name}:{}: include needs a file-backed document", no + 1))
                })?;
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let (file, sub) = match parts.as_slice() {
                    [file] => (*file, String::new()),
                    [file, "as", p] => (*file, join_key(prefix, p)),
                    _ => {
                        return Err(Error::Config(format!(
                            "{name}:{}: expected `include <path> [as <prefix>]`",
                            no + 1
                        )))
                    }
                };
                let sub = if sub.is_empty() { prefix.to_string() } else { sub };
                self.load_file(&dir.join(file), &sub, stack)?;
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{name}:{}: expected `key = value`", no + 1)))?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("{name}:{}: bad key `{k}`", no + 1)));
            }
            self.entries.insert(join_key(prefix, k), v.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    /// Typed lookup; `Ok(None)` when the key is absent.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    pub fn parse_req<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parse_opt(key)?
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    /// Comma-separated list; absent key gives `None`.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("`{key}`: cannot parse item `{s}`")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> Config {
        let p = format!("{prefix}.");
        Config {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
            sources: Vec::new(),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn sources(&self) -> &[(String, String)] {
        &self.sources
    }

    /// Canonical text with one sorted `key = value` line per entry.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn join_key(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

impl Config {
    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        self.get(key).map_or(Ok(default), |v| parse_bool(key, v))
    }
}
