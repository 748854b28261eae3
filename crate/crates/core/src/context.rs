//! The JSON context representation fed back into prompts: the prior state
//! rendered as a user-format `request` block, optionally merged with the
//! current turn's filtered system payload.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{Ontology, DELETE_MARKER};
use crate::payload::{SystemJson, UserJson};
use crate::state::DialogueState;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("context already carries a system block")]
    AlreadyMerged,
}

/// Context carried into a translation prompt. The state block always has
/// an empty `reject` map; the system block appears only on the user-side
/// prompt, after the current system payload has been filtered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextJson {
    pub state_block: UserJson,
    pub system_block: Option<SystemJson>,
}

/// Renders the prior state in user-payload format: every live
/// (domain, slot, value) triple appears under `request` with its surrogate
/// slot name and a single-element value list. Slots pending deletion are
/// omitted so the marker cannot re-enter the state through the in-context
/// rule.
pub fn state_to_context_json(state: &DialogueState, ontology: &Ontology) -> ContextJson {
    let mut block = UserJson::empty();
    for (domain, canonical, value) in state.iter() {
        if value == DELETE_MARKER {
            continue;
        }
        let Ok(surrogate) = ontology.from_canonical(domain, canonical) else {
            continue;
        };
        block
            .request
            .entry(domain.to_string())
            .or_default()
            .insert(surrogate.to_string(), vec![value.to_string()]);
    }
    ContextJson {
        state_block: block,
        system_block: None,
    }
}

/// Attaches this turn's filtered system payload to the context. The state
/// block is untouched. Merging twice is an error.
pub fn merge_context(ctx: &ContextJson, sys: &SystemJson) -> Result<ContextJson, ContextError> {
    if ctx.system_block.is_some() {
        return Err(ContextError::AlreadyMerged);
    }
    Ok(ContextJson {
        state_block: ctx.state_block.clone(),
        system_block: Some(sys.clone()),
    })
}

/// Serializes the context for the `[PREDIC]` substitution: one compact
/// line for the state block, then one for the system block when present.
/// Domains and slots appear in ontology declaration order, so the output
/// is byte-stable.
pub fn serialize_context(ctx: &ContextJson, ontology: &Ontology) -> String {
    let mut out = ctx
        .state_block
        .to_ordered_payload_value(ontology)
        .to_string();
    if let Some(sys) = &ctx.system_block {
        out.push('\n');
        out.push_str(&sys.to_ordered_payload_value(ontology).to_string());
    }
    out
}
