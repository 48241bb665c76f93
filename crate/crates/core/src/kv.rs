//! Plain `key = value` configuration text shared by the network, trainer,
//! synthesizer and CLI configs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
}

/// Ordered key-value map; `#` starts a comment line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(KvError::Syntax { line: i + 1 })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(KvError::Syntax { line: i + 1 });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(KvError::Duplicate { line: i + 1, key });
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|_| KvError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .transpose()
    }

    /// Overwrites `slot` when `key` is present.
    pub fn update<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), KvError> {
        if let Some(v) = self.parse_opt(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, KvError> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .filter(|_| !v.is_empty())
                    .map(|p| {
                        p.trim().parse().map_err(|_| KvError::Value {
                            key: key.to_string(),
                            value: v.to_string(),
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    /// Rejects keys outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<(), KvError> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(KvError::Unknown(k.clone())),
            None => Ok(()),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KvMap::parse("# net\nvariant = psmm\nwidths = 8, 16,32,64\n\n").unwrap();
        assert_eq!(kv.get("variant"), Some("psmm"));
        assert_eq!(kv.list::<usize>("widths").unwrap(), Some(vec![8, 16, 32, 64]));
        assert_eq!(KvMap::parse(&kv.render()).unwrap(), kv);
    }

    #[test]
    fn errors_carry_position() {
        assert_eq!(KvMap::parse("a = 1\nnope").unwrap_err(), KvError::Syntax { line: 2 });
        assert!(matches!(KvMap::parse("a=1\na=2"), Err(KvError::Duplicate { line: 2, .. })));
        let kv = KvMap::parse("epochs = x").unwrap();
        assert!(kv.parse_opt::<usize>("epochs").is_err());
        assert_eq!(kv.check_keys(&["seed"]), Err(KvError::Unknown("epochs".into())));
    }
}
