//! Flat `key = value` run configuration with typed values, `include`
//! directives and environment overrides.
//!
//! ```text
//! # comment
//! include = "base.conf"
//! tsg.lr = 1e-4
//! tsg.loss = "wce"
//! sgi.prior_learning = true
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Prefix for environment overrides: `tsg.lr` is overridden by `MASKTALK_TSG_LR`.
pub const ENV_PREFIX: &str = "MASKTALK_";

/// Defaults shipped with the repository.
pub const DEFAULTS: &str = include_str!("../../../../configs/desk.conf");

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl Value {
    fn parse(raw: &str) -> Value {
        let raw = raw.trim();
        if let Some(s) = raw.strip_prefix('"').and_then(|r| r.strip_suffix('"')) {
            return Value::Str(s.to_string());
        }
        match raw {
            "true" => return Value::Bool(true),
            "false" => return Value::Bool(false),
            _ => {}
        }
        if let Ok(i) = raw.parse::<i64>() {
            return Value::Int(i);
        }
        if let Ok(f) = raw.parse::<f64>() {
            return Value::Float(f);
        }
        Value::Str(raw.to_string())
    }

    fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Bool(_) => "bool",
            Value::Str(_) => "string",
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x:?}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Str(s) => write!(f, "\"{s}\""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

impl Config {
    /// The in-repo defaults.
    pub fn defaults() -> Self {
        let mut c = Config::default();
        c.merge_text(DEFAULTS, None).expect("shipped defaults parse");
        c
    }

    /// Defaults overlaid with a config file (and its includes).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = Self::defaults();
        c.merge_file(path.as_ref(), 0)?;
        Ok(c)
    }

    fn merge_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > 8 {
            return Err(Error::Config(format!("include depth exceeded at {}", path.display())));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.merge_text_at(&text, path.parent(), depth)
    }

    pub fn merge_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        self.merge_text_at(text, base, 0)
    }

    fn merge_text_at(&mut self, text: &str, base: Option<&Path>, depth: usize) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split_once('#').map_or(line, |(a, _)| a).trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            let value = Value::parse(raw);
            if key == "include" {
                let Value::Str(rel) = value else {
                    return Err(Error::Config("include needs a path".into()));
                };
                let path = base.map_or_else(|| Path::new(&rel).to_path_buf(), |b| b.join(&rel));
                self.merge_file(&path, depth + 1)?;
            } else {
                self.set(key, value)?;
            }
        }
        Ok(())
    }

    /// Sets a key. An existing key keeps its type; ints widen to floats.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let value = match (self.values.get(key), value) {
            (Some(Value::Float(_)), Value::Int(i)) => Value::Float(i as f64),
            (Some(Value::Str(_)), Value::Int(i)) => Value::Str(i.to_string()),
            (Some(old), new) if std::mem::discriminant(old) != std::mem::discriminant(&new) => {
                return Err(Error::Config(format!(
                    "`{key}` is {}, got {} ({new})",
                    old.type_name(),
                    new.type_name()
                )))
            }
            (_, new) => new,
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn set_str(&mut self, key: &str, raw: &str) -> Result<()> {
        self.set(key, Value::parse(raw))
    }

    /// Applies `MASKTALK_*` variables to known keys.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(std::env::vars())
    }

    pub fn apply_overrides(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let env: BTreeMap<String, String> = vars.into_iter().collect();
        let keys: Vec<String> = self.values.keys().cloned().collect();
        for key in keys {
            if let Some(raw) = env.get(&env_name(&key)) {
                self.set_str(&key, raw)?;
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Result<&Value> {
        self.values.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn int(&self, key: &str) -> Result<i64> {
        match self.get(key)? {
            Value::Int(i) => Ok(*i),
            v => Err(Error::Config(format!("`{key}` should be int, is {}", v.type_name()))),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.int(key)?;
        usize::try_from(v).map_err(|_| Error::Config(format!("`{key}` must be non-negative, got {v}")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        Ok(self.usize(key)? as u64)
    }

    pub fn float(&self, key: &str) -> Result<f64> {
        match self.get(key)? {
            Value::Float(f) => Ok(*f),
            Value::Int(i) => Ok(*i as f64),
            v => Err(Error::Config(format!("`{key}` should be float, is {}", v.type_name()))),
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            Value::Bool(b) => Ok(*b),
            v => Err(Error::Config(format!("`{key}` should be bool, is {}", v.type_name()))),
        }
    }

    pub fn string(&self, key: &str) -> Result<String> {
        match self.get(key)? {
            Value::Str(s) => Ok(s.clone()),
            v => Err(Error::Config(format!("`{key}` should be string, is {}", v.type_name()))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    /// Canonical sorted text form; the hash is taken over this.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        short_hash(self.to_text().as_bytes())
    }

    /// Hash over the keys under the given prefixes plus the shared top-level keys.
    pub fn section_hash(&self, prefixes: &[&str]) -> String {
        let text: String = self
            .values
            .iter()
            .filter(|(k, _)| !k.contains('.') || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        short_hash(text.as_bytes())
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}

/// First 16 hex digits of SHA-256.
pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_hash_is_stable() {
        let a = Config::defaults();
        let b = Config::defaults();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        assert_eq!(a.usize("resolution").unwrap(), 64);
        let mut round = Config::default();
        round.merge_text(&a.to_text(), None).unwrap();
        assert_eq!(round, a);
    }

    #[test]
    fn typed_values() {
        let mut c = Config::default();
        c.merge_text("a = 3\nb = 1e-4\nc = true\nd = \"wce\"\ne = plain # trailing\n", None).unwrap();
        assert_eq!(c.int("a").unwrap(), 3);
        assert_eq!(c.float("b").unwrap(), 1e-4);
        assert!(c.bool("c").unwrap());
        assert_eq!(c.string("d").unwrap(), "wce");
        assert_eq!(c.string("e").unwrap(), "plain");
        assert!(c.bool("a").is_err());
        assert!(c.set_str("c", "7").is_err());
        c.set_str("b", "2").unwrap();
        assert_eq!(c.float("b").unwrap(), 2.0);
    }

    #[test]
    fn includes_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.conf"), "seed = 5\ntsg.lr = 0.5\n").unwrap();
        std::fs::write(dir.path().join("run.conf"), "include = \"base.conf\"\ntsg.lr = 0.25\n").unwrap();
        let mut c = Config::load(dir.path().join("run.conf")).unwrap();
        assert_eq!(c.int("seed").unwrap(), 5);
        assert_eq!(c.float("tsg.lr").unwrap(), 0.25);
        let h = c.hash();
        c.apply_overrides([(env_name("tsg.lr"), "0.125".to_string()), ("OTHER".into(), "1".into())]).unwrap();
        assert_eq!(c.float("tsg.lr").unwrap(), 0.125);
        assert_ne!(c.hash(), h);
        assert_eq!(env_name("tsg.lr"), "MASKTALK_TSG_LR");
    }

    #[test]
    fn section_hash_ignores_other_sections() {
        let mut a = Config::defaults();
        let h = a.section_hash(&["sync."]);
        a.set_str("tsg.lr", "0.5").unwrap();
        assert_eq!(a.section_hash(&["sync."]), h);
        a.set_str("sync.lr", "0.5").unwrap();
        assert_ne!(a.section_hash(&["sync."]), h);
    }
}
