//! Line-based `key=value` files used for configs and dataset metadata.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key=value` entries. Every key must be consumed before
/// [`KvMap::finish`], so typos surface as errors.
#[derive(Debug, Clone, Default)]
pub struct KvMap {
    entries: BTreeMap<String, (String, u64)>,
}

impl KvMap {
    /// Parses text. Blank lines and lines starting with `#` are ignored. The
    /// `u64` kept per entry is the byte offset of its line.
    pub fn parse(text: &str) -> std::result::Result<Self, (u64, String)> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len() as u64;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err((start, format!("expected key=value, found {trimmed:?}")));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err((start, "empty key".into()));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), start)).is_some() {
                return Err((start, format!("duplicate key {key:?}")));
            }
        }
        Ok(Self { entries })
    }

    /// Parses a config file body; problems become config errors.
    pub fn parse_config(text: &str) -> Result<Self> {
        Self::parse(text).map_err(|(off, msg)| Error::Config(format!("byte {off}: {msg}")))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn take_raw(&mut self, key: &str) -> Option<(String, u64)> {
        self.entries.remove(key)
    }

    /// Removes and parses `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((raw, off)) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("byte {off}: bad value {raw:?} for {key}: {e}"))),
        }
    }

    /// Overwrites `*slot` when `key` is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (_, off))) => Err(Error::Config(format!("byte {off}: unknown key {k:?}"))),
        }
    }
}
