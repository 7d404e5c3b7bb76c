//! `key = value` text shared by the config, manifest and file headers.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `key = value` pairs; blank lines and `#` comments are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvText {
    pub entries: Vec<(String, String)>,
    what: &'static str,
}

impl KvText {
    pub fn new(what: &'static str) -> Self {
        Self { entries: Vec::new(), what }
    }

    pub fn parse(text: &str, what: &'static str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                what,
                detail: format!("line {}: expected `key = value`, got `{line}`", n + 1),
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries, what })
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Format { what: self.what, detail: format!("missing `{key}`") })
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse().map_err(|_| self.bad(key, v))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(key, v)),
        }
    }

    /// Whitespace-separated list of exactly `N` values.
    pub fn parse_array<T: FromStr + Copy + Default, const N: usize>(&self, key: &str) -> Result<[T; N]> {
        let v = self.require(key)?;
        parse_array(v).ok_or_else(|| self.bad(key, v))
    }

    pub fn bad(&self, key: &str, value: &str) -> Error {
        Error::Format { what: self.what, detail: format!("bad value `{value}` for `{key}`") }
    }

    /// Rejects keys outside `known`.
    pub fn only(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((k, _)) => Err(Error::Format { what: self.what, detail: format!("unknown key `{k}`") }),
            None => Ok(()),
        }
    }
}

pub fn parse_array<T: FromStr + Copy + Default, const N: usize>(s: &str) -> Option<[T; N]> {
    let mut out = [T::default(); N];
    let mut it = s.split_whitespace();
    for o in &mut out {
        *o = it.next()?.parse().ok()?;
    }
    it.next().is_none().then_some(out)
}

pub fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}
