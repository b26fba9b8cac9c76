//! Flat `key = value` config files.
//!
//! UTF-8 text, one assignment per line, sections expressed by dotted keys
//! (`joint.epochs = 30`). Blank lines and `#` comments are ignored. Every CLI
//! flag overrides its config key.

use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Parsed configuration, plus the origin used in error messages.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    origin: String,
    map: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(origin: &str, text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                msg: format!("expected \"key = value\", got {raw:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: lineno + 1,
                    msg: "empty key".into(),
                });
            }
            map.insert(key.to_string(), value.to_string());
        }
        Ok(ConfigMap {
            origin: origin.to_string(),
            map,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        ConfigMap::parse(&path.display().to_string(), &text)
    }

    /// Override or add a key (CLI flags land here).
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.map.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::InvalidArgument(format!(
                    "{}: key {key} = {v:?} is not a valid {kind}",
                    self.origin
                ))
            }),
        }
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parse_as(key, "integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.parse_as(key, "integer")
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parse_as(key, "number")
    }

    pub fn get_f32(&self, key: &str) -> Result<Option<f32>> {
        self.parse_as(key, "number")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.map.get(key).map(String::as_str) {
            None => Ok(None),
            Some("true") | Some("1") | Some("yes") | Some("on") => Ok(Some(true)),
            Some("false") | Some("0") | Some("no") | Some("off") => Ok(Some(false)),
            Some(v) => Err(Error::InvalidArgument(format!(
                "{}: key {key} = {v:?} is not a boolean",
                self.origin
            ))),
        }
    }

    /// Render back to the file format (used for run-directory snapshots).
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dotted_keys_comments_and_blanks() {
        let text = "# a comment\n\njoint.epochs = 30\nbatch_size=16\nmode.no_filtering = true\n";
        let cfg = ConfigMap::parse("test.conf", text).unwrap();
        assert_eq!(cfg.get_usize("joint.epochs").unwrap(), Some(30));
        assert_eq!(cfg.get_usize("batch_size").unwrap(), Some(16));
        assert_eq!(cfg.get_bool("mode.no_filtering").unwrap(), Some(true));
        assert_eq!(cfg.get("missing"), None);
    }

    #[test]
    fn overrides_replace_values() {
        let mut cfg = ConfigMap::parse("t", "seed = 1\n").unwrap();
        cfg.set("seed", "7");
        assert_eq!(cfg.get_u64("seed").unwrap(), Some(7));
    }

    #[test]
    fn bad_lines_and_values_error() {
        assert!(ConfigMap::parse("t", "no equals sign\n").is_err());
        let cfg = ConfigMap::parse("t", "k = notanumber\n").unwrap();
        assert!(cfg.get_usize("k").is_err());
        assert!(cfg.get_bool("k").is_err());
    }

    #[test]
    fn snapshot_roundtrips() {
        let cfg = ConfigMap::parse("t", "b = 2\na = 1\n").unwrap();
        let snap = cfg.snapshot();
        let back = ConfigMap::parse("snap", &snap).unwrap();
        assert_eq!(back.get("a"), Some("1"));
        assert_eq!(back.get("b"), Some("2"));
    }
}
