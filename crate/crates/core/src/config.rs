//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! consumed by the reader; leftovers are reported as unknown keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::invalid(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got {line:?}"),
                )
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::invalid(format!("line {}", lineno + 1), "empty key"));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::invalid(key, "duplicate key"));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    /// Removes and parses `key`, leaving `slot` untouched when absent.
    pub fn take<T>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(raw) = self.entries.remove(key) {
            *slot = raw
                .parse()
                .map_err(|e: T::Err| Error::invalid(key, format!("{raw:?}: {e}")))?;
        }
        Ok(())
    }

    /// Fails on the first key no reader consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_keys().next() {
            Some(k) => Err(Error::UnknownKey(k)),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown() {
        let mut kv = KvMap::parse("# comment\nseed = 7\n\nlr=0.5\nbogus = 1\n").unwrap();
        let (mut seed, mut lr) = (0u64, 0.0f64);
        kv.take("seed", &mut seed).unwrap();
        kv.take("lr", &mut lr).unwrap();
        assert_eq!((seed, lr), (7, 0.5));
        match kv.finish() {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "bogus"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_value_names_key() {
        let mut kv = KvMap::parse("steps = many").unwrap();
        let mut steps = 0usize;
        let err = kv.take("steps", &mut steps).unwrap_err();
        assert!(err.to_string().contains("steps"));
    }

    #[test]
    fn malformed_line() {
        assert!(KvMap::parse("just words").is_err());
        assert!(KvMap::parse("a = 1\na = 2").is_err());
    }
}
