//! Turn orchestration. One turn runs five steps: render the prior state as
//! context, translate and apply the system utterance, filter the system
//! payload, translate the user utterance against the merged context, apply
//! the user payload. Everything between the two model calls is pure, so a
//! stored turn replays offline.

use serde::Serialize;
use thiserror::Error;

use crate::backend::{BackendError, TranslationBackend};
use crate::context::{merge_context, state_to_context_json, ContextError};
use crate::filter::filter_system_json;
use crate::ontology::Ontology;
use crate::payload::{
    parse_system_json, parse_user_json, ParseError, Speaker, SystemJson, UserJson,
};
use crate::prompt::{ExampleSet, PromptError, TemplateSet};
use crate::state::DialogueState;
use crate::update::{apply_system_json, apply_user_json};

/// Ablation switches. NoFilter keeps the unfiltered system payload in the
/// user-side context; NoFramework translates both utterances in a single
/// prompt and applies the result directly, bypassing the system step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    #[default]
    Full,
    NoFilter,
    NoFramework,
}

/// Shared, read-only dependencies of a run. A run is scoped to a fixed
/// domain set; prompts mention those domains only.
pub struct PipelineDeps<'a> {
    pub ontology: &'a Ontology,
    pub templates: &'a TemplateSet,
    pub examples: &'a ExampleSet,
    pub backend: &'a dyn TranslationBackend,
    pub domains: Vec<String>,
    pub mode: PipelineMode,
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Context(#[from] ContextError),
}

/// A step failure, tagged with where in the turn it happened.
#[derive(Debug, Error)]
#[error("turn {turn} step {step}: {source}")]
pub struct PipelineError {
    pub turn: usize,
    pub step: u8,
    #[source]
    pub source: StepError,
}

/// Everything one turn produced. States are stored alongside the parsed
/// payloads so the rule steps can be re-run offline against the record.
#[derive(Debug, Clone, Serialize)]
pub struct TurnRecord {
    pub turn_index: usize,
    pub system_utterance: String,
    pub user_utterance: String,
    pub system_json: SystemJson,
    pub user_json: UserJson,
    pub temp_state: DialogueState,
    pub final_state: DialogueState,
    pub raw_payloads: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DialogueRun {
    pub dialogue_id: String,
    pub domain_scope: Vec<String>,
    pub turns: Vec<TurnRecord>,
}

/// A failed run still carries the turns that completed, so callers can
/// score or inspect the prefix.
#[derive(Debug, Error)]
#[error("dialogue {}: {error}", partial.dialogue_id)]
pub struct DialogueFailure {
    pub partial: DialogueRun,
    pub error: PipelineError,
}

/// Runs one turn. An empty system utterance (always the case on the first
/// turn) skips the system-side steps entirely: the system payload is empty
/// and no system block is merged into the user-side context.
pub fn run_turn(
    prev_state: &DialogueState,
    turn_index: usize,
    sys_utt: &str,
    usr_utt: &str,
    deps: &PipelineDeps,
) -> Result<TurnRecord, PipelineError> {
    let tag = |step: u8| {
        move |source: StepError| PipelineError {
            turn: turn_index,
            step,
            source,
        }
    };
    if usr_utt.trim().is_empty() {
        return Err(tag(4)(StepError::Precondition(
            "user utterance is empty".into(),
        )));
    }
    if deps.mode == PipelineMode::NoFramework {
        return run_turn_merged(prev_state, turn_index, sys_utt, usr_utt, deps);
    }

    let mut raw_payloads = Vec::new();
    let mut warnings = Vec::new();

    // Step 1: render context and translate the system utterance.
    let ctx = state_to_context_json(prev_state, deps.ontology);
    let system_json = if sys_utt.is_empty() {
        SystemJson::empty()
    } else {
        let prompt = deps
            .templates
            .build_prompt(
                Speaker::System,
                &deps.domains,
                &ctx,
                sys_utt,
                deps.ontology,
                deps.examples,
            )
            .map_err(|e| tag(1)(e.into()))?;
        let raw = deps
            .backend
            .translate(&prompt)
            .map_err(|e| tag(1)(e.into()))?;
        let parsed = parse_system_json(&raw, deps.ontology).map_err(|e| tag(1)(e.into()))?;
        raw_payloads.push(raw);
        warnings.extend(
            parsed
                .warnings
                .iter()
                .map(|w| format!("system translation: {w}")),
        );
        parsed.value
    };

    // Step 2: fold the system payload into the state.
    let outcome = apply_system_json(prev_state, &system_json, deps.ontology);
    let temp_state = outcome.state.clone();
    warnings.extend(
        outcome
            .warnings
            .iter()
            .map(|w| format!("system update: {w}")),
    );

    // Step 3: prune the payload before it enters context.
    let filtered = if deps.mode == PipelineMode::NoFilter {
        system_json.clone()
    } else {
        filter_system_json(&system_json, &outcome, deps.ontology)
    };

    // Step 4: translate the user utterance against the merged context.
    let user_ctx = if sys_utt.is_empty() {
        ctx
    } else {
        merge_context(&ctx, &filtered).map_err(|e| tag(4)(e.into()))?
    };
    let prompt = deps
        .templates
        .build_prompt(
            Speaker::User,
            &deps.domains,
            &user_ctx,
            usr_utt,
            deps.ontology,
            deps.examples,
        )
        .map_err(|e| tag(4)(e.into()))?;
    let raw = deps
        .backend
        .translate(&prompt)
        .map_err(|e| tag(4)(e.into()))?;
    let parsed = parse_user_json(&raw, deps.ontology).map_err(|e| tag(4)(e.into()))?;
    raw_payloads.push(raw);
    warnings.extend(
        parsed
            .warnings
            .iter()
            .map(|w| format!("user translation: {w}")),
    );

    // Step 5: fold the user payload into the state.
    let user_outcome = apply_user_json(&temp_state, &parsed.value, deps.ontology);
    warnings.extend(
        user_outcome
            .warnings
            .iter()
            .map(|w| format!("user update: {w}")),
    );

    Ok(TurnRecord {
        turn_index,
        system_utterance: sys_utt.to_string(),
        user_utterance: usr_utt.to_string(),
        system_json,
        user_json: parsed.value,
        temp_state,
        final_state: user_outcome.state,
        raw_payloads,
        warnings,
    })
}

/// The merged single-prompt ablation: both utterances travel in one
/// user-side prompt and the translation is applied directly, so the system
/// payload is never isolated, updated by its own rules, or filtered.
fn run_turn_merged(
    prev_state: &DialogueState,
    turn_index: usize,
    sys_utt: &str,
    usr_utt: &str,
    deps: &PipelineDeps,
) -> Result<TurnRecord, PipelineError> {
    let tag = |source: StepError| PipelineError {
        turn: turn_index,
        step: 4,
        source,
    };
    let ctx = state_to_context_json(prev_state, deps.ontology);
    let dialog = if sys_utt.is_empty() {
        format!("user: \"{usr_utt}\"")
    } else {
        format!("system: \"{sys_utt}\"\nuser: \"{usr_utt}\"")
    };
    let prompt = deps
        .templates
        .build_prompt_with_dialog(
            Speaker::User,
            &deps.domains,
            &ctx,
            &dialog,
            deps.ontology,
            deps.examples,
        )
        .map_err(|e| tag(e.into()))?;
    let raw = deps.backend.translate(&prompt).map_err(|e| tag(e.into()))?;
    let parsed = parse_user_json(&raw, deps.ontology).map_err(|e| tag(e.into()))?;
    let mut warnings: Vec<String> = parsed
        .warnings
        .iter()
        .map(|w| format!("merged translation: {w}"))
        .collect();
    let outcome = apply_user_json(prev_state, &parsed.value, deps.ontology);
    warnings.extend(
        outcome
            .warnings
            .iter()
            .map(|w| format!("merged update: {w}")),
    );
    Ok(TurnRecord {
        turn_index,
        system_utterance: sys_utt.to_string(),
        user_utterance: usr_utt.to_string(),
        system_json: SystemJson::empty(),
        user_json: parsed.value,
        temp_state: prev_state.clone(),
        final_state: outcome.state,
        raw_payloads: vec![raw],
        warnings,
    })
}

/// Threads state across turns, stopping at the first error. Completed
/// turns ride along with the failure.
pub fn run_dialogue(
    dialogue_id: &str,
    turns: &[(String, String)],
    deps: &PipelineDeps,
) -> Result<DialogueRun, Box<DialogueFailure>> {
    let mut run = DialogueRun {
        dialogue_id: dialogue_id.to_string(),
        domain_scope: deps.domains.clone(),
        turns: Vec::new(),
    };
    let fail = |run: DialogueRun, turn: usize, step: u8, source: StepError| {
        Box::new(DialogueFailure {
            partial: run,
            error: PipelineError { turn, step, source },
        })
    };
    if turns.is_empty() {
        return Err(fail(
            run,
            1,
            1,
            StepError::Precondition("dialogue has no turns".into()),
        ));
    }
    if !turns[0].0.is_empty() {
        return Err(fail(
            run,
            1,
            1,
            StepError::Precondition("first turn must have an empty system utterance".into()),
        ));
    }
    let mut state = DialogueState::new();
    for (idx, (sys_utt, usr_utt)) in turns.iter().enumerate() {
        match run_turn(&state, idx + 1, sys_utt, usr_utt, deps) {
            Ok(record) => {
                state = record.final_state.clone();
                run.turns.push(record);
            }
            Err(error) => {
                return Err(Box::new(DialogueFailure {
                    partial: run,
                    error,
                }));
            }
        }
    }
    Ok(run)
}
