//! Name-keyed registries used to select strategies at runtime.

use std::collections::BTreeMap;

pub struct Registry<T> {
    kind: &'static str,
    entries: BTreeMap<String, T>,
}

impl<T> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    /// Register `value` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: impl Into<String>, value: T) -> &mut Self {
        self.entries.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&T> {
        self.entries.get(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    /// Lookup with a readable error listing the known names.
    pub fn resolve(&self, name: &str) -> Result<&T, UnknownName> {
        self.get(name).ok_or_else(|| UnknownName {
            kind: self.kind,
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("unknown {kind} '{name}' (known: {known})")]
pub struct UnknownName {
    pub kind: &'static str,
    pub name: String,
    pub known: String,
}
