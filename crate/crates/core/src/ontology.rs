//! Domain/slot schema: canonical dataset slot names, prompt-facing surrogate
//! names, entity flags, and keyword value sets.
//!
//! Slot names come in two spellings. The *canonical* name is the dataset
//! name used in tracked states and gold labels (e.g. `pricerange`). The
//! *surrogate* name is the prompt-facing name used inside generated JSON
//! payloads (e.g. `price_range`). The mapping is an explicit bijection per
//! domain; there is no fuzzy matching.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel value marking a slot the user rejected. It stays visible in the
/// tracked state and is treated as absent at scoring time.
pub const DELETE_MARKER: &str = "[Delete]";

/// Normalized spelling of "no preference" values.
pub const DONT_CARE: &str = "dontcare";

/// Default schema covering the attraction, hotel, restaurant, taxi and
/// train domains.
pub const DEFAULT_ONTOLOGY_JSON: &str = include_str!("../assets/ontology.default.json");

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("ontology file not found: {0}")]
    MissingFile(String),
    #[error("failed to read ontology {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("ontology is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("ontology schema violation: {0}")]
    SchemaViolation(String),
    #[error("unknown domain: {0}")]
    UnknownDomain(String),
    #[error("unknown slot {slot:?} in domain {domain:?}")]
    UnknownSlot { domain: String, slot: String },
}

/// One tracked or informational slot of a domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDef {
    /// Dataset slot name, e.g. `pricerange`.
    pub canonical: String,
    /// Prompt-facing slot name, e.g. `price_range`.
    pub surrogate: String,
    /// Entity slots (names, places) may be written into the state even when
    /// the slot is not yet in context.
    #[serde(default)]
    pub is_entity: bool,
    /// Informational slots (phone numbers, addresses) are requestable in
    /// dialogue but never enter the tracked state.
    #[serde(default)]
    pub informational: bool,
    /// Closed value set for categorical slots, rendered into prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainDef {
    pub name: String,
    pub slots: Vec<SlotDef>,
}

/// Validated schema for a set of domains. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "OntologyDoc")]
pub struct Ontology {
    domains: Vec<DomainDef>,
    /// (domain, surrogate) -> index into the domain's slot list.
    #[serde(skip)]
    by_surrogate: BTreeMap<(String, String), usize>,
    /// (domain, canonical) -> index into the domain's slot list.
    #[serde(skip)]
    by_canonical: BTreeMap<(String, String), usize>,
}

/// On-disk shape: `{"domains": [{"name", "slots": [...]}]}`.
#[derive(Debug, Deserialize)]
struct OntologyDoc {
    domains: Vec<DomainDef>,
}

impl TryFrom<OntologyDoc> for Ontology {
    type Error = OntologyError;

    fn try_from(doc: OntologyDoc) -> Result<Self, OntologyError> {
        Ontology::new(doc.domains)
    }
}

impl Ontology {
    pub fn new(domains: Vec<DomainDef>) -> Result<Self, OntologyError> {
        if domains.is_empty() {
            return Err(OntologyError::SchemaViolation(
                "domains list is empty".into(),
            ));
        }
        let mut by_surrogate = BTreeMap::new();
        let mut by_canonical = BTreeMap::new();
        for domain in &domains {
            if domain.name.trim().is_empty() {
                return Err(OntologyError::SchemaViolation(
                    "domain with empty name".into(),
                ));
            }
            if domain.slots.is_empty() {
                return Err(OntologyError::SchemaViolation(format!(
                    "domain {:?} has no slots",
                    domain.name
                )));
            }
            for (idx, slot) in domain.slots.iter().enumerate() {
                if slot.canonical.trim().is_empty() || slot.surrogate.trim().is_empty() {
                    return Err(OntologyError::SchemaViolation(format!(
                        "domain {:?} slot #{idx} has an empty name",
                        domain.name
                    )));
                }
                if let Some(keywords) = &slot.keywords {
                    if keywords.is_empty() {
                        return Err(OntologyError::SchemaViolation(format!(
                            "slot {}.{} declares an empty keyword list",
                            domain.name, slot.canonical
                        )));
                    }
                    for keyword in keywords {
                        if *keyword != normalize_value(keyword) {
                            return Err(OntologyError::SchemaViolation(format!(
                                "keyword {keyword:?} of {}.{} is not normalized",
                                domain.name, slot.canonical
                            )));
                        }
                    }
                }
                let surrogate_key = (domain.name.clone(), slot.surrogate.clone());
                if by_surrogate.insert(surrogate_key, idx).is_some() {
                    return Err(OntologyError::SchemaViolation(format!(
                        "duplicate surrogate slot {:?} in domain {:?}",
                        slot.surrogate, domain.name
                    )));
                }
                let canonical_key = (domain.name.clone(), slot.canonical.clone());
                if by_canonical.insert(canonical_key, idx).is_some() {
                    return Err(OntologyError::SchemaViolation(format!(
                        "duplicate canonical slot {:?} in domain {:?}",
                        slot.canonical, domain.name
                    )));
                }
            }
        }
        let mut names = domains.iter().map(|d| d.name.as_str()).collect::<Vec<_>>();
        names.sort_unstable();
        names.dedup();
        if names.len() != domains.len() {
            return Err(OntologyError::SchemaViolation(
                "duplicate domain name".into(),
            ));
        }
        Ok(Self {
            domains,
            by_surrogate,
            by_canonical,
        })
    }

    /// The built-in five-domain schema.
    pub fn default_builtin() -> Self {
        serde_json::from_str(DEFAULT_ONTOLOGY_JSON).expect("built-in ontology is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, OntologyError> {
        // Deserializing the raw document first keeps SchemaViolation
        // distinct from Parse; going through serde's try_from would fold
        // both into a serde error.
        let doc: OntologyDoc = serde_json::from_str(json)?;
        Self::new(doc.domains)
    }

    /// Loads and validates an ontology config from disk.
    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        if !path.exists() {
            return Err(OntologyError::MissingFile(path.display().to_string()));
        }
        let raw = fs::read_to_string(path).map_err(|source| OntologyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&raw)
    }

    /// Domain names in declaration order.
    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn domains(&self) -> &[DomainDef] {
        &self.domains
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.domains.iter().any(|d| d.name == domain)
    }

    pub fn domain(&self, domain: &str) -> Result<&DomainDef, OntologyError> {
        self.domains
            .iter()
            .find(|d| d.name == domain)
            .ok_or_else(|| OntologyError::UnknownDomain(domain.to_string()))
    }

    /// Slot definitions of `domain` in declaration order.
    pub fn slots(&self, domain: &str) -> Result<&[SlotDef], OntologyError> {
        Ok(&self.domain(domain)?.slots)
    }

    pub fn slot_by_surrogate(&self, domain: &str, surrogate: &str) -> Option<&SlotDef> {
        let key = (domain.to_string(), surrogate.to_string());
        let idx = *self.by_surrogate.get(&key)?;
        Some(&self.domains.iter().find(|d| d.name == domain)?.slots[idx])
    }

    pub fn slot_by_canonical(&self, domain: &str, canonical: &str) -> Option<&SlotDef> {
        let key = (domain.to_string(), canonical.to_string());
        let idx = *self.by_canonical.get(&key)?;
        Some(&self.domains.iter().find(|d| d.name == domain)?.slots[idx])
    }

    /// Maps a prompt-facing slot name to its dataset name.
    pub fn to_canonical(&self, domain: &str, surrogate: &str) -> Result<&str, OntologyError> {
        self.domain(domain)?;
        self.slot_by_surrogate(domain, surrogate)
            .map(|s| s.canonical.as_str())
            .ok_or_else(|| OntologyError::UnknownSlot {
                domain: domain.to_string(),
                slot: surrogate.to_string(),
            })
    }

    /// Maps a dataset slot name back to its prompt-facing name. Exact
    /// inverse of [`Ontology::to_canonical`].
    pub fn from_canonical(&self, domain: &str, canonical: &str) -> Result<&str, OntologyError> {
        self.domain(domain)?;
        self.slot_by_canonical(domain, canonical)
            .map(|s| s.surrogate.as_str())
            .ok_or_else(|| OntologyError::UnknownSlot {
                domain: domain.to_string(),
                slot: canonical.to_string(),
            })
    }
}

/// Normalizes a slot value: lower-cased, trimmed, internal whitespace
/// collapsed to single spaces. `"any"` becomes [`DONT_CARE`]; the
/// [`DELETE_MARKER`] passes through unchanged. Total and idempotent.
pub fn normalize_value(value: &str) -> String {
    let trimmed = value.trim();
    if trimmed == DELETE_MARKER {
        return DELETE_MARKER.to_string();
    }
    let collapsed = trimmed
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    if collapsed == "any" {
        DONT_CARE.to_string()
    } else {
        collapsed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtin_ontology_covers_five_domains() {
        let ont = Ontology::default_builtin();
        assert_eq!(
            ont.domain_names(),
            vec!["attraction", "hotel", "restaurant", "taxi", "train"]
        );
    }

    #[test]
    fn surrogate_mapping_matches_prompt_names() {
        let ont = Ontology::default_builtin();
        assert_eq!(
            ont.to_canonical("restaurant", "price_range").unwrap(),
            "pricerange"
        );
        assert_eq!(ont.to_canonical("restaurant", "cuisine").unwrap(), "food");
        assert_eq!(ont.to_canonical("restaurant", "full_name").unwrap(), "name");
        assert_eq!(ont.to_canonical("restaurant", "direction").unwrap(), "area");
        assert_eq!(
            ont.to_canonical("restaurant", "clock_book").unwrap(),
            "booktime"
        );
        assert_eq!(
            ont.to_canonical("restaurant", "week_day").unwrap(),
            "bookday"
        );
        assert_eq!(
            ont.to_canonical("restaurant", "num_people").unwrap(),
            "bookpeople"
        );
    }

    #[test]
    fn unknown_slot_is_an_error() {
        let ont = Ontology::default_builtin();
        assert!(matches!(
            ont.to_canonical("hotel", "nonexistent_slot"),
            Err(OntologyError::UnknownSlot { .. })
        ));
        assert!(matches!(
            ont.to_canonical("spaceship", "full_name"),
            Err(OntologyError::UnknownDomain(_))
        ));
    }

    #[test]
    fn mapping_round_trips_over_every_slot() {
        let ont = Ontology::default_builtin();
        for domain in ont.domains() {
            for slot in &domain.slots {
                let canonical = ont.to_canonical(&domain.name, &slot.surrogate).unwrap();
                assert_eq!(canonical, slot.canonical);
                let surrogate = ont.from_canonical(&domain.name, canonical).unwrap();
                assert_eq!(surrogate, slot.surrogate);
            }
        }
    }

    #[test]
    fn duplicate_surrogate_is_schema_violation() {
        let json = r#"{"domains": [{"name": "restaurant", "slots": [
            {"canonical": "area", "surrogate": "direction"},
            {"canonical": "destination", "surrogate": "direction"}
        ]}]}"#;
        let err = Ontology::from_json(json).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("direction"),
            "should name the offending key: {msg}"
        );
    }

    #[test]
    fn empty_domain_list_is_schema_violation() {
        let err = Ontology::from_json(r#"{"domains": []}"#).unwrap_err();
        assert!(matches!(err, OntologyError::SchemaViolation(_)));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = Ontology::load(Path::new("/nonexistent/ontology.json")).unwrap_err();
        assert!(matches!(err, OntologyError::MissingFile(_)));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_value("  Cheap "), "cheap");
        assert_eq!(normalize_value("any"), "dontcare");
        assert_eq!(normalize_value("Any"), "dontcare");
        assert_eq!(normalize_value("[Delete]"), "[Delete]");
        assert_eq!(normalize_value("Acorn  Guest\tHouse"), "acorn guest house");
        assert_eq!(normalize_value("   "), "");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in "\\PC*") {
            let once = normalize_value(&v);
            prop_assert_eq!(normalize_value(&once), once);
        }

        #[test]
        fn normalize_never_yields_surrounding_whitespace(v in "\\PC*") {
            let n = normalize_value(&v);
            prop_assert_eq!(n.trim(), n.as_str());
        }
    }
}
