//! Intermediate JSON payloads generated by the language model, one shape
//! per speaker, plus the tolerant parser that recovers them from raw
//! completion text.
//!
//! Slot names inside payloads are surrogate names; mapping to canonical
//! dataset names happens in the update engine. Values are kept verbatim as
//! generated; normalization also happens at update time.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ontology::Ontology;

/// Which speaker a payload belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn key(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::System => "system",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

pub type SlotValues = BTreeMap<String, Vec<String>>;
pub type DomainSlotValues = BTreeMap<String, SlotValues>;
pub type DomainSlotList = BTreeMap<String, Vec<String>>;

/// Parsed user-side payload: `{"user": {"reject": {...}, "request": {...}}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserJson {
    pub reject: DomainSlotList,
    pub request: DomainSlotValues,
}

impl UserJson {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.reject.is_empty() && self.request.is_empty()
    }

    /// The wire shape with the `user` top-level key, domains and slots in
    /// sorted order.
    pub fn to_payload_value(&self) -> Value {
        serde_json::json!({
            "user": {
                "reject": self.reject,
                "request": self.request,
            }
        })
    }

    /// Like [`UserJson::to_payload_value`] but with domains and slots in
    /// ontology declaration order, for byte-stable prompt context.
    pub fn to_ordered_payload_value(&self, ontology: &Ontology) -> Value {
        let reject = ordered_slot_lists(&self.reject, ontology);
        let request = ordered_slot_values(&self.request, ontology);
        serde_json::json!({"user": {"reject": reject, "request": request}})
    }
}

/// Parsed system-side payload:
/// `{"system": {"not_available": {...}, "info": {...}, "ask_for": {...}}}`.
///
/// The all-empty value is valid and serves as the first-turn placeholder.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemJson {
    pub not_available: DomainSlotValues,
    pub info: DomainSlotValues,
    pub ask_for: DomainSlotList,
}

impl SystemJson {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.not_available.is_empty() && self.info.is_empty() && self.ask_for.is_empty()
    }

    pub fn to_payload_value(&self) -> Value {
        serde_json::json!({
            "system": {
                "not_available": self.not_available,
                "info": self.info,
                "ask_for": self.ask_for,
            }
        })
    }

    pub fn to_ordered_payload_value(&self, ontology: &Ontology) -> Value {
        let not_available = ordered_slot_values(&self.not_available, ontology);
        let info = ordered_slot_values(&self.info, ontology);
        let ask_for = ordered_slot_lists(&self.ask_for, ontology);
        serde_json::json!({
            "system": {"not_available": not_available, "info": info, "ask_for": ask_for}
        })
    }
}

/// Either payload, as returned by the side-dispatching parser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PayloadJson {
    User(UserJson),
    System(SystemJson),
}

/// A recoverable oddity encountered while validating a payload. Dropped
/// unknown (domain, slot) pairs each produce exactly one warning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    UnknownDomain {
        action: String,
        domain: String,
        slot: String,
    },
    UnknownSlot {
        action: String,
        domain: String,
        slot: String,
    },
    UnknownAction {
        side: Speaker,
        action: String,
    },
    CoercedScalar {
        action: String,
        domain: String,
        slot: String,
    },
    MalformedEntry {
        action: String,
        domain: String,
        detail: String,
    },
}

impl ParseWarning {
    /// True for the two variants that record a dropped (domain, slot) pair.
    pub fn is_dropped_pair(&self) -> bool {
        matches!(
            self,
            ParseWarning::UnknownDomain { .. } | ParseWarning::UnknownSlot { .. }
        )
    }
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::UnknownDomain {
                action,
                domain,
                slot,
            } => write!(
                f,
                "dropped unknown domain {domain:?} (slot {slot:?}) in {action}"
            ),
            ParseWarning::UnknownSlot {
                action,
                domain,
                slot,
            } => write!(f, "dropped unknown slot {domain}.{slot} in {action}"),
            ParseWarning::UnknownAction { side, action } => {
                write!(f, "dropped unknown action {action:?} in {side} payload")
            }
            ParseWarning::CoercedScalar {
                action,
                domain,
                slot,
            } => write!(
                f,
                "coerced scalar value of {domain}.{slot} in {action} to a list"
            ),
            ParseWarning::MalformedEntry {
                action,
                domain,
                detail,
            } => write!(
                f,
                "dropped malformed entry under {action}.{domain}: {detail}"
            ),
        }
    }
}

/// A validated payload together with the warnings its validation produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("no parseable JSON object in completion: {0}")]
    MalformedPayload(String),
    #[error("payload top-level key is {found:?}, expected {expected:?}")]
    WrongSide {
        expected: &'static str,
        found: String,
    },
}

/// Recovers the JSON object from raw completion text.
///
/// Text after the first `[END]` is discarded. Starting at the first `{`,
/// the longest brace-balanced substring that parses as JSON wins (brace
/// counting is string-aware). If the braces never balance, one repair is
/// attempted: close an unterminated string and append the missing closing
/// braces.
pub fn extract_json_object(raw: &str) -> Result<Value, ParseError> {
    let head = match raw.find("[END]") {
        Some(idx) => &raw[..idx],
        None => raw,
    };
    let start = head
        .find('{')
        .ok_or_else(|| ParseError::MalformedPayload(preview(raw)))?;
    let text = &head[start..];

    let mut depth: i64 = 0;
    let mut in_string = false;
    let mut escaped = false;
    let mut balanced_ends = Vec::new();
    for (idx, ch) in text.char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    balanced_ends.push(idx + ch.len_utf8());
                }
                if depth < 0 {
                    break;
                }
            }
            _ => {}
        }
    }

    for &end in balanced_ends.iter().rev() {
        if let Ok(value) = serde_json::from_str::<Value>(&text[..end]) {
            return Ok(value);
        }
    }
    if balanced_ends.is_empty() && depth > 0 {
        let mut repaired = text.trim_end().to_string();
        if in_string {
            repaired.push('"');
        }
        for _ in 0..depth {
            repaired.push('}');
        }
        if let Ok(value) = serde_json::from_str::<Value>(&repaired) {
            return Ok(value);
        }
    }
    Err(ParseError::MalformedPayload(preview(raw)))
}

fn preview(raw: &str) -> String {
    let snippet: String = raw.chars().take(120).collect();
    snippet
}

/// Parses a raw completion into the payload for `side`, dropping unknown
/// domains and slots with warnings instead of failing.
pub fn parse_json_payload(
    raw: &str,
    side: Speaker,
    ontology: &Ontology,
) -> Result<Parsed<PayloadJson>, ParseError> {
    match side {
        Speaker::User => parse_user_json(raw, ontology).map(|p| Parsed {
            value: PayloadJson::User(p.value),
            warnings: p.warnings,
        }),
        Speaker::System => parse_system_json(raw, ontology).map(|p| Parsed {
            value: PayloadJson::System(p.value),
            warnings: p.warnings,
        }),
    }
}

pub fn parse_user_json(raw: &str, ontology: &Ontology) -> Result<Parsed<UserJson>, ParseError> {
    let body = payload_body(raw, Speaker::User)?;
    let mut warnings = Vec::new();
    let mut user = UserJson::empty();
    for (action, value) in body {
        match action.as_str() {
            "reject" => {
                user.reject = collect_slot_lists(&value, "user.reject", ontology, &mut warnings);
            }
            "request" => {
                user.request = collect_slot_values(&value, "user.request", ontology, &mut warnings);
            }
            other => warnings.push(ParseWarning::UnknownAction {
                side: Speaker::User,
                action: other.to_string(),
            }),
        }
    }
    Ok(Parsed {
        value: user,
        warnings,
    })
}

pub fn parse_system_json(raw: &str, ontology: &Ontology) -> Result<Parsed<SystemJson>, ParseError> {
    let body = payload_body(raw, Speaker::System)?;
    let mut warnings = Vec::new();
    let mut system = SystemJson::empty();
    for (action, value) in body {
        match action.as_str() {
            "not_available" => {
                system.not_available =
                    collect_slot_values(&value, "system.not_available", ontology, &mut warnings);
            }
            "info" => {
                system.info = collect_slot_values(&value, "system.info", ontology, &mut warnings);
            }
            "ask_for" => {
                system.ask_for =
                    collect_slot_lists(&value, "system.ask_for", ontology, &mut warnings);
            }
            other => warnings.push(ParseWarning::UnknownAction {
                side: Speaker::System,
                action: other.to_string(),
            }),
        }
    }
    Ok(Parsed {
        value: system,
        warnings,
    })
}

/// Extracts the object under the side's top-level key as (action, value)
/// pairs in document order.
fn payload_body(raw: &str, side: Speaker) -> Result<Vec<(String, Value)>, ParseError> {
    let value = extract_json_object(raw)?;
    let object = value
        .as_object()
        .ok_or_else(|| ParseError::MalformedPayload(preview(raw)))?;
    let body = match object.get(side.key()) {
        Some(body) => body,
        None => {
            let found = object
                .keys()
                .next()
                .cloned()
                .unwrap_or_else(|| "<empty object>".to_string());
            return Err(ParseError::WrongSide {
                expected: side.key(),
                found,
            });
        }
    };
    let body = body
        .as_object()
        .ok_or_else(|| ParseError::MalformedPayload(preview(raw)))?;
    Ok(body.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
}

/// Validates a `domain -> slot -> [values]` block, dropping unknown keys.
fn collect_slot_values(
    value: &Value,
    action: &str,
    ontology: &Ontology,
    warnings: &mut Vec<ParseWarning>,
) -> DomainSlotValues {
    let mut out = DomainSlotValues::new();
    let Some(domains) = value.as_object() else {
        if !value.is_null() {
            warnings.push(ParseWarning::MalformedEntry {
                action: action.to_string(),
                domain: "<root>".to_string(),
                detail: "expected an object of domains".to_string(),
            });
        }
        return out;
    };
    for (domain, slots) in domains {
        let Some(slots) = slots.as_object() else {
            warnings.push(ParseWarning::MalformedEntry {
                action: action.to_string(),
                domain: domain.clone(),
                detail: "expected an object of slots".to_string(),
            });
            continue;
        };
        let domain_known = ontology.has_domain(domain);
        for (slot, values) in slots {
            if !domain_known {
                warnings.push(ParseWarning::UnknownDomain {
                    action: action.to_string(),
                    domain: domain.clone(),
                    slot: slot.clone(),
                });
                continue;
            }
            if ontology.slot_by_surrogate(domain, slot).is_none() {
                warnings.push(ParseWarning::UnknownSlot {
                    action: action.to_string(),
                    domain: domain.clone(),
                    slot: slot.clone(),
                });
                continue;
            }
            match value_list(values) {
                ValueList::List(list) => {
                    out.entry(domain.clone())
                        .or_default()
                        .insert(slot.clone(), list);
                }
                ValueList::Coerced(list) => {
                    warnings.push(ParseWarning::CoercedScalar {
                        action: action.to_string(),
                        domain: domain.clone(),
                        slot: slot.clone(),
                    });
                    out.entry(domain.clone())
                        .or_default()
                        .insert(slot.clone(), list);
                }
                ValueList::Malformed(detail) => {
                    warnings.push(ParseWarning::MalformedEntry {
                        action: action.to_string(),
                        domain: domain.clone(),
                        detail: format!("slot {slot:?}: {detail}"),
                    });
                }
            }
        }
        // An unknown domain with an empty slot object drops nothing tracked,
        // so it produces no warning.
    }
    out
}

/// Validates a `domain -> [slot names]` block, dropping unknown keys.
fn collect_slot_lists(
    value: &Value,
    action: &str,
    ontology: &Ontology,
    warnings: &mut Vec<ParseWarning>,
) -> DomainSlotList {
    let mut out = DomainSlotList::new();
    let Some(domains) = value.as_object() else {
        if !value.is_null() {
            warnings.push(ParseWarning::MalformedEntry {
                action: action.to_string(),
                domain: "<root>".to_string(),
                detail: "expected an object of domains".to_string(),
            });
        }
        return out;
    };
    for (domain, slots) in domains {
        let Some(slots) = slots.as_array() else {
            warnings.push(ParseWarning::MalformedEntry {
                action: action.to_string(),
                domain: domain.clone(),
                detail: "expected a list of slot names".to_string(),
            });
            continue;
        };
        let domain_known = ontology.has_domain(domain);
        for slot in slots {
            let Some(slot) = slot.as_str() else {
                warnings.push(ParseWarning::MalformedEntry {
                    action: action.to_string(),
                    domain: domain.clone(),
                    detail: format!("non-string slot name {slot}"),
                });
                continue;
            };
            if !domain_known {
                warnings.push(ParseWarning::UnknownDomain {
                    action: action.to_string(),
                    domain: domain.clone(),
                    slot: slot.to_string(),
                });
                continue;
            }
            if ontology.slot_by_surrogate(domain, slot).is_none() {
                warnings.push(ParseWarning::UnknownSlot {
                    action: action.to_string(),
                    domain: domain.clone(),
                    slot: slot.to_string(),
                });
                continue;
            }
            let entry = out.entry(domain.clone()).or_default();
            if !entry.iter().any(|s| s == slot) {
                entry.push(slot.to_string());
            }
        }
    }
    out
}

enum ValueList {
    List(Vec<String>),
    Coerced(Vec<String>),
    Malformed(String),
}

fn value_list(value: &Value) -> ValueList {
    match value {
        Value::Array(items) => {
            let mut list = Vec::with_capacity(items.len());
            for item in items {
                match scalar_string(item) {
                    Some(s) => list.push(s),
                    None => {
                        return ValueList::Malformed(format!("non-scalar value {item}"));
                    }
                }
            }
            ValueList::List(list)
        }
        other => match scalar_string(other) {
            Some(s) => ValueList::Coerced(vec![s]),
            None => ValueList::Malformed(format!("unsupported value shape {other}")),
        },
    }
}

fn scalar_string(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn ordered_slot_values(map: &DomainSlotValues, ontology: &Ontology) -> Value {
    let mut out = serde_json::Map::new();
    for domain in ordered_domains(map.keys(), ontology) {
        let slots = &map[&domain];
        let mut slot_map = serde_json::Map::new();
        for slot in ordered_slots(&domain, slots.keys(), ontology) {
            slot_map.insert(slot.clone(), serde_json::json!(slots[&slot]));
        }
        out.insert(domain, Value::Object(slot_map));
    }
    Value::Object(out)
}

fn ordered_slot_lists(map: &DomainSlotList, ontology: &Ontology) -> Value {
    let mut out = serde_json::Map::new();
    for domain in ordered_domains(map.keys(), ontology) {
        out.insert(domain.clone(), serde_json::json!(map[&domain]));
    }
    Value::Object(out)
}

/// Ontology declaration order first, then any stragglers in sorted order.
fn ordered_domains<'a>(
    present: impl Iterator<Item = &'a String>,
    ontology: &Ontology,
) -> Vec<String> {
    let present: Vec<&String> = present.collect();
    let mut out = Vec::with_capacity(present.len());
    for name in ontology.domain_names() {
        if present.iter().any(|p| **p == name) {
            out.push(name);
        }
    }
    for p in present {
        if !out.contains(p) {
            out.push(p.clone());
        }
    }
    out
}

fn ordered_slots<'a>(
    domain: &str,
    present: impl Iterator<Item = &'a String>,
    ontology: &Ontology,
) -> Vec<String> {
    let present: Vec<&String> = present.collect();
    let mut out = Vec::with_capacity(present.len());
    if let Ok(defs) = ontology.slots(domain) {
        for def in defs {
            if present.iter().any(|p| **p == def.surrogate) {
                out.push(def.surrogate.clone());
            }
        }
    }
    for p in present {
        if !out.contains(p) {
            out.push(p.clone());
        }
    }
    out
}
