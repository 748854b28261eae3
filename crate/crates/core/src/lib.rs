//! Zero-shot dialogue state tracking by translating utterances to JSON.
//!
//! Each turn, the prior state is rendered as a JSON context, both
//! utterances are translated to action payloads by a language model, and
//! deterministic rules fold the payloads into the next state. A filter
//! prunes the system payload before it enters the user-side context so
//! model noise cannot leak into the state. Everything outside the two
//! model calls is pure and replayable.

pub mod backend;
pub mod context;
pub mod eval;
pub mod filter;
pub mod ontology;
pub mod payload;
pub mod pipeline;
pub mod prompt;
pub mod state;
pub mod update;

pub use backend::{
    make_backend, prompt_key, BackendConfig, BackendError, BackendKind, ReplayBackend,
    ReplayFixture, TranslationBackend,
};
pub use context::{merge_context, serialize_context, state_to_context_json, ContextJson};
pub use eval::{
    format_report_table, joint_goal_accuracy, load_corpus, run_benchmark, slot_accuracy,
    BenchmarkDeps, BenchmarkFlags, CorpusDialogue, EvalError, GoldTurn, MetricsReport, TurnKey,
};
pub use filter::filter_system_json;
pub use ontology::{normalize_value, Ontology, SlotDef, DELETE_MARKER, DONT_CARE};
pub use payload::{
    parse_system_json, parse_user_json, ParseError, ParseWarning, Parsed, Speaker, SystemJson,
    UserJson,
};
pub use pipeline::{
    run_dialogue, run_turn, DialogueFailure, DialogueRun, PipelineDeps, PipelineError,
    PipelineMode, TurnRecord,
};
pub use prompt::{DomainExample, ExampleSet, PromptError, TemplateSet, STOP_TOKEN};
pub use state::DialogueState;
pub use update::{apply_system_json, apply_user_json, IgnoreReason, UpdateOutcome};
