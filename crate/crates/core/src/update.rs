//! The updating strategies: fold a system payload or a user payload into
//! the dialogue state.
//!
//! Rule table, by action:
//!
//! | action          | condition                         | effect                     |
//! |-----------------|-----------------------------------|----------------------------|
//! | `reject`        | slot not informational            | value becomes `[Delete]`   |
//! | `request`       | values non-empty, not informational | first value written      |
//! | `info`          | entity slot OR key already in state | first value written      |
//! | `ask_for`       | always                            | ignored                    |
//! | `not_available` | always                            | ignored                    |
//!
//! Within one user payload, `reject` is applied before `request`, so a
//! request on the same slot wins. The in-context test is key presence in
//! the state at call time; a `[Delete]`-valued key counts as in context.
//! No rule ever writes an empty-string value.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ontology::{normalize_value, Ontology, DELETE_MARKER};
use crate::payload::{SystemJson, UserJson};
use crate::state::DialogueState;

/// Why a payload slot produced no state write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgnoreReason {
    /// `info` slot that is neither an entity nor already in the state.
    NonEntityNotInContext,
    /// Slot listed under `ask_for`.
    AskFor,
    /// Slot listed under `not_available`.
    NotAvailable,
    /// Empty value list, nothing to write.
    EmptyValues,
    /// Informational slots never enter the state.
    Informational,
    /// Value normalized to the empty string.
    BlankValue,
    /// Surrogate name not mappable (payloads parsed through the validator
    /// never carry these).
    UnknownSlot,
}

impl fmt::Display for IgnoreReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            IgnoreReason::NonEntityNotInContext => "non_entity_not_in_context",
            IgnoreReason::AskFor => "ask_for",
            IgnoreReason::NotAvailable => "not_available",
            IgnoreReason::EmptyValues => "empty_values",
            IgnoreReason::Informational => "informational",
            IgnoreReason::BlankValue => "blank_value",
            IgnoreReason::UnknownSlot => "unknown_slot",
        };
        f.write_str(name)
    }
}

/// Result of one rule application: the new state plus an account of what
/// was written and what was ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateOutcome {
    pub state: DialogueState,
    /// (domain, canonical slot) pairs whose stored value actually changed,
    /// including newly written keys and fresh `[Delete]` marks.
    pub changed: BTreeSet<(String, String)>,
    /// (domain, surrogate slot, reason) for every slot the rules ignored.
    pub ignored: BTreeSet<(String, String, IgnoreReason)>,
    /// Human-readable notes, e.g. multi-value truncation.
    pub warnings: Vec<String>,
}

impl UpdateOutcome {
    fn new(state: DialogueState) -> Self {
        Self {
            state,
            changed: BTreeSet::new(),
            ignored: BTreeSet::new(),
            warnings: Vec::new(),
        }
    }

    fn ignore(&mut self, domain: &str, surrogate: &str, reason: IgnoreReason) {
        self.ignored
            .insert((domain.to_string(), surrogate.to_string(), reason));
    }

    /// Writes a normalized value, tracking the change set. Empty values
    /// are never written.
    fn write(&mut self, domain: &str, canonical: &str, value: String) {
        debug_assert!(!value.is_empty());
        let prior = self.state.get(domain, canonical).map(str::to_string);
        if prior.as_deref() != Some(value.as_str()) {
            self.changed
                .insert((domain.to_string(), canonical.to_string()));
            self.state.set(domain, canonical, value);
        }
    }
}

/// Picks the single value to write from a payload value list: the first
/// entry, normalized. Extra entries produce a warning.
fn single_value(
    domain: &str,
    surrogate: &str,
    values: &[String],
    warnings: &mut Vec<String>,
) -> Option<String> {
    let first = values.first()?;
    if values.len() > 1 {
        warnings.push(format!(
            "{domain}.{surrogate}: {} values supplied, using the first",
            values.len()
        ));
    }
    Some(normalize_value(first))
}

/// Folds a system payload into the state: `info` slots are written when
/// the slot is an entity or its key is already in the state; everything
/// under `ask_for` and `not_available` is ignored. Returns a new state;
/// the input is untouched.
pub fn apply_system_json(
    state: &DialogueState,
    sys: &SystemJson,
    ontology: &Ontology,
) -> UpdateOutcome {
    let mut outcome = UpdateOutcome::new(state.clone());
    for (domain, slots) in &sys.info {
        for (surrogate, values) in slots {
            let Some(def) = ontology.slot_by_surrogate(domain, surrogate) else {
                outcome.ignore(domain, surrogate, IgnoreReason::UnknownSlot);
                continue;
            };
            if def.informational {
                outcome.ignore(domain, surrogate, IgnoreReason::Informational);
                continue;
            }
            if values.is_empty() {
                outcome.ignore(domain, surrogate, IgnoreReason::EmptyValues);
                continue;
            }
            // In-context is tested against the state at call time, not the
            // partially updated one.
            let in_context = state.contains(domain, &def.canonical);
            if !def.is_entity && !in_context {
                outcome.ignore(domain, surrogate, IgnoreReason::NonEntityNotInContext);
                continue;
            }
            match single_value(domain, surrogate, values, &mut outcome.warnings) {
                Some(v) if !v.is_empty() => {
                    let canonical = def.canonical.clone();
                    outcome.write(domain, &canonical, v);
                }
                _ => outcome.ignore(domain, surrogate, IgnoreReason::BlankValue),
            }
        }
    }
    for (domain, slots) in &sys.ask_for {
        for surrogate in slots {
            outcome.ignore(domain, surrogate, IgnoreReason::AskFor);
        }
    }
    for (domain, slots) in &sys.not_available {
        for surrogate in slots.keys() {
            outcome.ignore(domain, surrogate, IgnoreReason::NotAvailable);
        }
    }
    outcome
}

/// Folds a user payload into the state: rejected slots are marked with
/// `[Delete]` first, then requested slots are written, overwriting any
/// prior value including the marker. Returns a new state.
pub fn apply_user_json(
    state: &DialogueState,
    usr: &UserJson,
    ontology: &Ontology,
) -> UpdateOutcome {
    let mut outcome = UpdateOutcome::new(state.clone());
    for (domain, slots) in &usr.reject {
        for surrogate in slots {
            let Some(def) = ontology.slot_by_surrogate(domain, surrogate) else {
                outcome.ignore(domain, surrogate, IgnoreReason::UnknownSlot);
                continue;
            };
            if def.informational {
                outcome.ignore(domain, surrogate, IgnoreReason::Informational);
                continue;
            }
            let canonical = def.canonical.clone();
            outcome.write(domain, &canonical, DELETE_MARKER.to_string());
        }
    }
    for (domain, slots) in &usr.request {
        for (surrogate, values) in slots {
            let Some(def) = ontology.slot_by_surrogate(domain, surrogate) else {
                outcome.ignore(domain, surrogate, IgnoreReason::UnknownSlot);
                continue;
            };
            if def.informational {
                outcome.ignore(domain, surrogate, IgnoreReason::Informational);
                continue;
            }
            if values.is_empty() {
                outcome.ignore(domain, surrogate, IgnoreReason::EmptyValues);
                continue;
            }
            match single_value(domain, surrogate, values, &mut outcome.warnings) {
                Some(v) if !v.is_empty() => {
                    let canonical = def.canonical.clone();
                    // A changed entry that was first marked [Delete] by the
                    // reject pass in this same call is superseded, not both.
                    outcome.write(domain, &canonical, v);
                }
                _ => outcome.ignore(domain, surrogate, IgnoreReason::BlankValue),
            }
        }
    }
    // Keep changed consistent with the final state: a reject immediately
    // overwritten by a request in the same payload is one net change.
    outcome
        .changed
        .retain(|(domain, slot)| outcome.state.get(domain, slot) != state.get(domain, slot));
    outcome
}
