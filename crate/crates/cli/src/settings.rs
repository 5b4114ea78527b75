//! Flat `key = value` configuration with command-line overrides.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {raw:?}", n + 1))?;
        let k = k.trim();
        if k.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Configuration values from a file, overridden by flags. Every lookup is
/// recorded with its resolved value so the full configuration can be
/// written back out.
pub struct Settings {
    given: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Settings {
    pub fn load(config: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut given = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_kv(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            given.insert(k.clone(), v.clone());
        }
        Ok(Settings {
            given,
            resolved: RefCell::new(BTreeMap::new()),
        })
    }

    fn raw(&self, key: &str) -> Option<&String> {
        self.given.get(key)
    }

    fn record(&self, key: &str, value: String) {
        self.resolved.borrow_mut().insert(key.to_string(), value);
    }

    pub fn get<T: FromStr + Display>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let value = match self.raw(key) {
            Some(s) => s.parse::<T>().map_err(|e| anyhow!("config key {key}: cannot parse {s:?}: {e}"))?,
            None => default,
        };
        self.record(key, value.to_string());
        Ok(value)
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        let value = match self.raw(key).map(|s| s.to_ascii_lowercase()) {
            None => default,
            Some(s) => match s.as_str() {
                "true" | "1" | "yes" | "y" => true,
                "false" | "0" | "no" | "n" => false,
                _ => bail!("config key {key}: expected a boolean, got {s:?}"),
            },
        };
        self.record(key, value.to_string());
        Ok(value)
    }

    pub fn get_list<T: FromStr + Display>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let value = match self.raw(key) {
            Some(s) => s
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| p.parse::<T>().map_err(|e| anyhow!("config key {key}: cannot parse {p:?}: {e}")))
                .collect::<Result<Vec<T>>>()?,
            None => default,
        };
        self.record(key, join(&value));
        Ok(value)
    }

    pub fn get_pair(&self, key: &str, default: (usize, usize)) -> Result<(usize, usize)> {
        let v = self.get_list(key, vec![default.0, default.1])?;
        match v[..] {
            [a, b] => Ok((a, b)),
            _ => bail!("config key {key}: expected two comma-separated values"),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.optional_path(key)?
            .ok_or_else(|| anyhow!("missing required path `{key}` (flag --{} or config key)", key.replace('_', "-")))
    }

    pub fn optional_path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.raw(key).map(|s| {
            self.record(key, s.clone());
            PathBuf::from(s)
        }))
    }

    /// Fails on keys that no lookup consumed; returns the resolved values.
    pub fn finish(&self) -> Result<BTreeMap<String, String>> {
        let resolved = self.resolved.borrow();
        let unknown: Vec<&String> = self.given.keys().filter(|k| !resolved.contains_key(*k)).collect();
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "));
        }
        Ok(resolved.clone())
    }
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn to_kv_text(values: &BTreeMap<String, String>) -> String {
    values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "# run\nlr = 0.5\nepochs=3 # short\n\nuse_gru = yes\n").unwrap();
        let s = Settings::load(Some(&path), &[("epochs".into(), "4".into())]).unwrap();
        assert_eq!(s.get("lr", 0.1).unwrap(), 0.5);
        assert_eq!(s.get("epochs", 9usize).unwrap(), 4);
        assert!(s.get_bool("use_gru", false).unwrap());
        assert_eq!(s.get("batch_size", 32usize).unwrap(), 32);
        let r = s.finish().unwrap();
        assert_eq!(r["batch_size"], "32");
        assert_eq!(to_kv_text(&r), "batch_size = 32\nepochs = 4\nlr = 0.5\nuse_gru = true\n");
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let s = Settings::load(None, &[("typo".into(), "1".into())]).unwrap();
        assert!(s.finish().is_err());
        assert!(parse_kv("no equals sign").is_err());
        let s = Settings::load(None, &[("lr".into(), "fast".into())]).unwrap();
        assert!(s.get("lr", 0.1).is_err());
        let s = Settings::load(None, &[("length".into(), "1,2,3".into())]).unwrap();
        assert!(s.get_pair("length", (1, 2)).is_err());
    }
}
