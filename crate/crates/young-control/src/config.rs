//! Flat key-value experiment configuration with one nesting level:
//!
//! ```text
//! experiment = linear-check     # top-level key
//! [noise]                       # block
//! alpha = 0.25
//! m_y = 10.0
//! ```
//!
//! Keys carry their unit as a suffix (`reach_time_s`, `rate_per_s`); values
//! are plain scalars, strings, or comma-separated lists. Every key present
//! in the file must be consumed by the experiment — leftovers are reported
//! as configuration errors so typos cannot silently fall back to defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Config {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated block header", lineno + 1)))?
                    .trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                    return Err(Error::Config(format!("line {}: bad block name {name:?}", lineno + 1)));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", lineno + 1)));
            };
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Config(format!("line {}: bad key {key:?}", lineno + 1)));
            }
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            if entries.insert(full.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{full}`", lineno + 1)));
            }
        }
        Ok(Self { entries, used: RefCell::new(BTreeSet::new()) })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v)
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.raw(key).unwrap_or(default)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.raw(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        v.parse().map_err(|e| Error::Config(format!("key `{key}`: {e}")))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            Some(v) => v.parse().map_err(|e| Error::Config(format!("key `{key}`: {e}"))),
            None => Ok(default),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            Some(v) => v.parse().map_err(|e| Error::Config(format!("key `{key}`: {e}"))),
            None => Ok(default),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            Some(v) => v.parse().map_err(|e| Error::Config(format!("key `{key}`: {e}"))),
            None => Ok(default),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::Config(format!("key `{key}`: expected true/false, got {v:?}"))),
            None => Ok(default),
        }
    }

    /// Comma-separated list of floats.
    pub fn list_f64(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.raw(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        v.split(',')
            .map(|s| s.trim().parse().map_err(|e| Error::Config(format!("key `{key}`: {e}"))))
            .collect()
    }

    pub fn list_f64_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        if self.has(key) {
            self.list_f64(key)
        } else {
            Ok(default.to_vec())
        }
    }

    /// Error out if any key in the file was never consumed (unknown keys
    /// are rejected, not ignored).
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> =
            self.entries.keys().filter(|k| !used.contains(*k)).map(|k| k.as_str()).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key(s): {}", unknown.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
experiment = linear-check  # which experiment\n\
[noise]\n\
alpha = 0.25\n\
kappa = 1.0\n\
m_y = 10.0\n\
[horizon]\n\
reach_time_s = 0.25\n\
m_y_values = 2500, 5000, 10000\n\
";

    #[test]
    fn parses_blocks_and_scalars() {
        let c = Config::parse(SAMPLE).unwrap();
        assert_eq!(c.str_or("experiment", ""), "linear-check");
        assert_eq!(c.f64("noise.alpha").unwrap(), 0.25);
        assert_eq!(c.f64("horizon.reach_time_s").unwrap(), 0.25);
        assert_eq!(c.list_f64("horizon.m_y_values").unwrap(), vec![2500.0, 5000.0, 10000.0]);
        assert_eq!(c.f64_or("noise.kappa", 9.0).unwrap(), 1.0);
        assert_eq!(c.f64("noise.m_y").unwrap(), 10.0);
        c.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let c = Config::parse("foo = 1\n").unwrap();
        assert!(matches!(c.finish(), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_and_malformed_lines_fail() {
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::parse("[unclosed\n").is_err());
    }

    #[test]
    fn missing_required_key_is_config_error() {
        let c = Config::parse("").unwrap();
        assert!(matches!(c.f64("noise.alpha"), Err(Error::Config(_))));
    }
}
