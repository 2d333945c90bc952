//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. A line
//! `include = other.cfg` splices in another file, resolved relative to the
//! including file; keys read later override earlier ones.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses text that must not contain `include` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        kv.merge_text(text, None, &mut Vec::new())?;
        Ok(kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut kv = Self::new();
        kv.merge_file(path.as_ref(), &mut Vec::new())?;
        Ok(kv)
    }

    fn merge_file(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> Result<()> {
        let canon = path.canonicalize().map_err(|e| Error::io(path, e))?;
        if stack.contains(&canon) {
            return Err(Error::Config(format!("include cycle through {}", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        stack.push(canon);
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        self.merge_text(&text, Some(&dir), stack)?;
        stack.pop();
        Ok(())
    }

    fn merge_text(&mut self, text: &str, dir: Option<&Path>, stack: &mut Vec<PathBuf>) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            if k == "include" {
                let dir = dir.ok_or_else(|| Error::Config("include is only allowed in files".into()))?;
                self.merge_file(&dir.join(v), stack)?;
            } else {
                self.map.insert(k.to_string(), v.to_string());
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.map.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn parse_value<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{s}` for `{key}`"))),
        }
    }

    pub fn parse_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn parse_list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid list entry `{p}` for `{key}`")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.map {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub(crate) fn join<V: fmt::Display>(items: &[V]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let kv = KeyValues::parse("# c\n a = 1 \n\nb=x, y\na = 2\n").unwrap();
        assert_eq!(kv.get("a"), Some("2"));
        assert_eq!(kv.parse_list::<String>("b").unwrap().unwrap(), vec!["x", "y"]);
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("include = x").is_err());
    }

    #[test]
    fn include_is_relative_and_overridable() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/base.cfg"), "a = 1\nb = 2\n").unwrap();
        std::fs::write(dir.path().join("run.cfg"), "include = sub/base.cfg\nb = 3\n").unwrap();
        let kv = KeyValues::load(dir.path().join("run.cfg")).unwrap();
        assert_eq!(kv.parse_value::<u32>("a").unwrap(), Some(1));
        assert_eq!(kv.parse_value::<u32>("b").unwrap(), Some(3));
        let round = KeyValues::parse(&kv.to_string()).unwrap();
        assert_eq!(round, kv);
    }

    #[test]
    fn include_cycle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.cfg"), "include = b.cfg\n").unwrap();
        std::fs::write(dir.path().join("b.cfg"), "include = a.cfg\n").unwrap();
        assert!(matches!(KeyValues::load(dir.path().join("a.cfg")), Err(Error::Config(_))));
    }
}
