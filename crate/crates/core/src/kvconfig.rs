//! Plain-text `key = value` files with `[section]` headers.
//!
//! Lines starting with `#` or `;` are comments. Keys may repeat within a
//! section; [`Section::get`] returns the last value and [`Section::all`]
//! every value in order.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Section {
    pub name: String,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|e| e.key == key).map(|e| e.value.as_str())
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |e| e.key == key).map(|e| e.value.as_str())
    }

    pub fn parse<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.entries.iter().rev().find(|e| e.key == key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| Error::Parse {
                line: e.line,
                message: format!("[{}] {} = {}: {err}", self.name, e.key, e.value),
            }),
        }
    }

    pub fn parse_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let Some(e) = self.entries.iter().rev().find(|e| e.key == key) else {
            return Ok(None);
        };
        split_list(&e.value)
            .map(|item| {
                item.parse::<T>().map_err(|err| Error::Parse {
                    line: e.line,
                    message: format!("[{}] {}: `{item}`: {err}", self.name, e.key),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Rejects keys outside `known`; keys ending in `.` in `known` act as prefixes.
    pub fn expect_keys(&self, known: &[&str]) -> Result<()> {
        for e in &self.entries {
            let ok = known
                .iter()
                .any(|k| if k.ends_with('.') { e.key.starts_with(k) } else { e.key == *k });
            if !ok {
                return Err(Error::Parse {
                    line: e.line,
                    message: format!("unknown key `{}` in [{}]", e.key, self.name),
                });
            }
        }
        Ok(())
    }
}

pub fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KvFile {
    pub sections: Vec<Section>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = vec![Section::default()];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Parse {
                    line: i + 1,
                    message: format!("unterminated section header `{line}`"),
                })?;
                sections.push(Section {
                    name: name.split_whitespace().collect::<Vec<_>>().join(" "),
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            sections.last_mut().expect("root section").entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line: i + 1,
            });
        }
        Ok(KvFile { sections })
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The first section called `name`, or an empty one.
    pub fn section(&self, name: &str) -> Section {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .cloned()
            .unwrap_or_else(|| Section {
                name: name.to_string(),
                entries: Vec::new(),
            })
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    /// Sections named `<prefix> <suffix>`, paired with the suffix.
    pub fn sections_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Section)> + 'a {
        self.sections.iter().filter_map(move |s| {
            s.name
                .strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(|suffix| (suffix, s))
        })
    }
}
