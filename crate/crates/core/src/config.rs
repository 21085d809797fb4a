//! Line-oriented `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Each consumer pulls
//! the keys it understands and then calls [`KeyValues::finish`], which rejects
//! anything left over.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    origin: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`", i + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("{origin}:{}: empty key", i + 1)));
            }
            if entries.insert(key.to_string(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::Config(format!("{origin}:{}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(KeyValues {
            origin: origin.to_string(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Removes `key` and parses its value.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| {
                Error::Config(format!("{}:{line}: bad value for `{key}`: {e}", self.origin))
            }),
        }
    }

    /// Removes `key` and parses it as a comma separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|e| {
                        Error::Config(format!("{}:{line}: bad entry `{s}` for `{key}`: {e}", self.origin))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::Config(format!(
                "{}:{line}: unknown key `{key}`",
                self.origin
            ))),
        }
    }
}

/// Checks `value > 0` for a configuration field.
pub(crate) fn positive<T: PartialOrd + Default + std::fmt::Display>(name: &str, value: T) -> Result<T> {
    if value > T::default() {
        Ok(value)
    } else {
        Err(Error::Config(format!("`{name}` must be positive, got {value}")))
    }
}
