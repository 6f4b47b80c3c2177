//! Flat `key = value` configuration files. `#` starts a comment line.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("bad value for `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("{0}")]
    Invalid(String),
}

/// Parsed key/value pairs; keys are consumed as they are read so leftovers
/// can be reported.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<KvFile, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if entries
                .insert(k.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
        }
        Ok(KvFile { entries })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn require_str(&mut self, key: &str) -> Result<String, ConfigError> {
        self.take_str(key)
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.take_str(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Value {
                    key: key.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    /// Reads `<key>` as whole milliseconds.
    pub fn take_ms(&mut self, key: &str) -> Result<Option<Duration>, ConfigError> {
        Ok(self.take::<u64>(key)?.map(Duration::from_millis))
    }

    /// Remaining keys starting with `prefix`, removed from the file.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, String)> {
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let v = self.entries.remove(&k).unwrap();
                (k, v)
            })
            .collect()
    }

    /// Fails on the first key nobody read.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_keys().next() {
            Some(k) => Err(ConfigError::Unknown(k)),
            None => Ok(()),
        }
    }
}
