//! Prunes a system payload before it enters the context representation:
//! only slots whose update actually landed, or entity slots, survive in
//! `info`; `ask_for` and `not_available` are emptied outright since the
//! update rules ignore them anyway and carrying them forward risks
//! contaminating the next translation.

use crate::ontology::Ontology;
use crate::payload::SystemJson;
use crate::update::UpdateOutcome;

/// Reduces `sys` against the outcome of its own application. `outcome`
/// must come from `apply_system_json` over this same payload. The input
/// is not mutated.
pub fn filter_system_json(
    sys: &SystemJson,
    outcome: &UpdateOutcome,
    ontology: &Ontology,
) -> SystemJson {
    let mut filtered = SystemJson::empty();
    for (domain, slots) in &sys.info {
        for (surrogate, values) in slots {
            let Some(def) = ontology.slot_by_surrogate(domain, surrogate) else {
                continue;
            };
            let updated = outcome
                .changed
                .contains(&(domain.clone(), def.canonical.clone()));
            if updated || def.is_entity {
                filtered
                    .info
                    .entry(domain.clone())
                    .or_default()
                    .insert(surrogate.clone(), values.clone());
            }
        }
    }
    filtered
}
