//! The tracked dialogue state: a map of domain -> canonical slot -> value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{normalize_value, Ontology, DELETE_MARKER};

#[derive(Debug, Error)]
pub enum StateError {
    #[error("state references unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("state references unknown slot {domain}.{slot}")]
    UnknownSlot { domain: String, slot: String },
    #[error("state holds informational slot {domain}.{slot}")]
    InformationalSlot { domain: String, slot: String },
    #[error("state value for {domain}.{slot} is not normalized: {value:?}")]
    UnnormalizedValue {
        domain: String,
        slot: String,
        value: String,
    },
}

/// Immutable-by-convention value map. Slots are keyed by canonical name;
/// a value may be the literal [`DELETE_MARKER`] (pending deletion) or
/// `dontcare`. Absence of a key means the slot is untracked.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogueState {
    entries: BTreeMap<String, BTreeMap<String, String>>,
}

impl DialogueState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(|slots| slots.is_empty())
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&str> {
        self.entries.get(domain)?.get(slot).map(String::as_str)
    }

    /// True when the (domain, slot) key is present, even with a
    /// [`DELETE_MARKER`] value. This is the in-context test used by the
    /// update rules.
    pub fn contains(&self, domain: &str, slot: &str) -> bool {
        self.get(domain, slot).is_some()
    }

    pub fn set(&mut self, domain: &str, slot: &str, value: String) {
        self.entries
            .entry(domain.to_string())
            .or_default()
            .insert(slot.to_string(), value);
    }

    /// Iterates (domain, slot, value) triples in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.entries.iter().flat_map(|(domain, slots)| {
            slots
                .iter()
                .map(move |(slot, value)| (domain.as_str(), slot.as_str(), value.as_str()))
        })
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// The scoring view: drops slots whose value is the [`DELETE_MARKER`]
    /// and domains left without slots.
    pub fn materialize(&self) -> DialogueState {
        let mut out = DialogueState::new();
        for (domain, slot, value) in self.iter() {
            if value != DELETE_MARKER {
                out.set(domain, slot, value.to_string());
            }
        }
        out
    }

    /// Keeps only the given domains' entries.
    pub fn project(&self, domains: &[String]) -> DialogueState {
        let mut out = DialogueState::new();
        for (domain, slot, value) in self.iter() {
            if domains.iter().any(|d| d == domain) {
                out.set(domain, slot, value.to_string());
            }
        }
        out
    }

    /// Checks the structural invariants against a schema: every key pair
    /// exists and is not informational, and every value is normalized and
    /// non-empty.
    pub fn validate(&self, ontology: &Ontology) -> Result<(), StateError> {
        for (domain, slot, value) in self.iter() {
            if !ontology.has_domain(domain) {
                return Err(StateError::UnknownDomain(domain.to_string()));
            }
            let def = ontology.slot_by_canonical(domain, slot).ok_or_else(|| {
                StateError::UnknownSlot {
                    domain: domain.to_string(),
                    slot: slot.to_string(),
                }
            })?;
            if def.informational {
                return Err(StateError::InformationalSlot {
                    domain: domain.to_string(),
                    slot: slot.to_string(),
                });
            }
            if value.is_empty() || normalize_value(value) != value {
                return Err(StateError::UnnormalizedValue {
                    domain: domain.to_string(),
                    slot: slot.to_string(),
                    value: value.to_string(),
                });
            }
        }
        Ok(())
    }
}

impl FromIterator<(String, String, String)> for DialogueState {
    fn from_iter<T: IntoIterator<Item = (String, String, String)>>(iter: T) -> Self {
        let mut state = DialogueState::new();
        for (domain, slot, value) in iter {
            state.set(&domain, &slot, value);
        }
        state
    }
}
