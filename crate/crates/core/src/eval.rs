//! Corpus ingestion and scoring. Dialogues are loaded from a MultiWOZ-style
//! export, run per domain scope, and scored with joint goal accuracy (exact
//! state match per turn) and slot accuracy (per turn-slot cell). Gold and
//! predicted values pass through the same normalization and the same
//! materialization, so the deletion marker never reaches a comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::backend::TranslationBackend;
use crate::ontology::{normalize_value, Ontology, OntologyError};
use crate::pipeline::{
    run_dialogue, DialogueFailure, DialogueRun, PipelineDeps, PipelineError, PipelineMode,
    TurnRecord,
};
use crate::prompt::{ExampleSet, TemplateSet};
use crate::state::DialogueState;

/// (dialogue id, 1-based turn index); the unit both metrics count over.
pub type TurnKey = (String, usize);

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus file not found: {0}")]
    MissingFile(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corpus is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("corpus format error in {dialogue_id}: {reason}")]
    Format { dialogue_id: String, reason: String },
    #[error("prediction and gold turn keys do not match: {0}")]
    KeyMismatch(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error("dialogue {id} failed: {source}")]
    Dialogue {
        id: String,
        #[source]
        source: PipelineError,
    },
}

/// One scored turn of a dialogue: the utterance pair fed to the pipeline
/// and the gold state restricted to the scoped domain.
#[derive(Debug, Clone, Serialize)]
pub struct GoldTurn {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub system_utterance: String,
    pub user_utterance: String,
    pub gold_state: DialogueState,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusDialogue {
    pub dialogue_id: String,
    pub turns: Vec<GoldTurn>,
}

/// Book-section keys map onto the book* slots; everything else in the
/// book block (the "booked" receipts) is not goal state.
fn book_slot_name(key: &str) -> Option<&'static str> {
    match key {
        "people" => Some("bookpeople"),
        "day" => Some("bookday"),
        "time" => Some("booktime"),
        "stay" => Some("bookstay"),
        _ => None,
    }
}

/// Gold annotations mark absent slots several ways; all of them mean "not
/// in the goal yet".
fn is_absent_gold(value: &str) -> bool {
    matches!(value, "" | "none" | "not mentioned")
}

fn gold_value(raw: &Value) -> Option<String> {
    // Some exports wrap multi-annotated values in a list; the first entry
    // is the canonical one.
    let s = match raw {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.first()?.as_str()?.to_string(),
        _ => return None,
    };
    let normalized = normalize_value(&s);
    (!is_absent_gold(&normalized)).then_some(normalized)
}

/// Loads a MultiWOZ-format dialogue export, keeping the dialogues whose
/// goal involves `domain` and projecting every gold state onto that
/// domain's tracked slots.
pub fn load_corpus(
    path: &Path,
    domain: &str,
    ontology: &Ontology,
) -> Result<Vec<CorpusDialogue>, EvalError> {
    if !path.is_file() {
        return Err(EvalError::MissingFile(path.to_path_buf()));
    }
    let raw = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: Value = serde_json::from_str(&raw)?;
    let Some(entries) = doc.as_object() else {
        return Err(EvalError::Format {
            dialogue_id: "<root>".into(),
            reason: "corpus root must be an object of dialogues".into(),
        });
    };
    let mut ids: Vec<&String> = entries.keys().collect();
    ids.sort();
    let mut out = Vec::new();
    for id in ids {
        let dialogue = &entries[id];
        let fmt_err = |reason: String| EvalError::Format {
            dialogue_id: id.clone(),
            reason,
        };
        let involved = dialogue
            .get("goal")
            .and_then(|g| g.get(domain))
            .and_then(Value::as_object)
            .is_some_and(|m| !m.is_empty());
        if !involved {
            continue;
        }
        let log = dialogue
            .get("log")
            .and_then(Value::as_array)
            .ok_or_else(|| fmt_err("missing log array".into()))?;
        if log.len() % 2 != 0 {
            return Err(fmt_err(format!(
                "log has {} entries, expected a user/system alternation",
                log.len()
            )));
        }
        let text_of = |idx: usize| -> Result<&str, EvalError> {
            log[idx]
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| fmt_err(format!("log entry {idx} has no text")))
        };
        let mut turns = Vec::new();
        for t in 0..log.len() / 2 {
            let user_utterance = text_of(2 * t)?.to_string();
            let system_utterance = if t == 0 {
                String::new()
            } else {
                text_of(2 * t - 1)?.to_string()
            };
            let metadata = log[2 * t + 1]
                .get("metadata")
                .and_then(Value::as_object)
                .ok_or_else(|| fmt_err(format!("log entry {} has no metadata", 2 * t + 1)))?;
            let mut gold_state = DialogueState::new();
            if let Some(block) = metadata.get(domain) {
                for (section, mapper) in [
                    ("semi", None),
                    (
                        "book",
                        Some(book_slot_name as fn(&str) -> Option<&'static str>),
                    ),
                ] {
                    let Some(slots) = block.get(section).and_then(Value::as_object) else {
                        continue;
                    };
                    for (key, raw_value) in slots {
                        let canonical = match mapper {
                            Some(map) => match map(key) {
                                Some(name) => name.to_string(),
                                None => continue,
                            },
                            None => key.to_lowercase(),
                        };
                        if ontology.slot_by_canonical(domain, &canonical).is_none() {
                            continue;
                        }
                        if let Some(value) = gold_value(raw_value) {
                            gold_state.set(domain, &canonical, value);
                        }
                    }
                }
            }
            turns.push(GoldTurn {
                dialogue_id: id.clone(),
                turn_index: t + 1,
                system_utterance,
                user_utterance,
                gold_state,
            });
        }
        out.push(CorpusDialogue {
            dialogue_id: id.clone(),
            turns,
        });
    }
    Ok(out)
}

fn keyed_states(
    pairs: &[(TurnKey, DialogueState)],
) -> Result<BTreeMap<&TurnKey, &DialogueState>, EvalError> {
    let map: BTreeMap<&TurnKey, &DialogueState> = pairs.iter().map(|(k, s)| (k, s)).collect();
    if map.len() != pairs.len() {
        return Err(EvalError::KeyMismatch("duplicate turn key".into()));
    }
    Ok(map)
}

fn check_same_keys(
    preds: &BTreeMap<&TurnKey, &DialogueState>,
    golds: &BTreeMap<&TurnKey, &DialogueState>,
) -> Result<(), EvalError> {
    if preds.len() != golds.len() || !preds.keys().eq(golds.keys()) {
        let pred_keys: BTreeSet<_> = preds.keys().collect();
        let gold_keys: BTreeSet<_> = golds.keys().collect();
        let diff = pred_keys
            .symmetric_difference(&gold_keys)
            .next()
            .map(|k| format!("{k:?}"))
            .unwrap_or_else(|| "count differs".into());
        return Err(EvalError::KeyMismatch(diff));
    }
    Ok(())
}

/// Fraction of turns whose materialized predicted state exactly equals the
/// materialized gold state. Empty inputs score 1.0 vacuously.
pub fn joint_goal_accuracy(
    preds: &[(TurnKey, DialogueState)],
    golds: &[(TurnKey, DialogueState)],
) -> Result<f64, EvalError> {
    let preds = keyed_states(preds)?;
    let golds = keyed_states(golds)?;
    check_same_keys(&preds, &golds)?;
    if preds.is_empty() {
        return Ok(1.0);
    }
    let matched = preds
        .iter()
        .filter(|(key, pred)| pred.materialize() == golds[*key].materialize())
        .count();
    Ok(matched as f64 / preds.len() as f64)
}

/// Correct and total (turn, slot) cells over the scoped domains' tracked
/// slots. A cell is correct when both sides agree, including both absent.
fn slot_cells(
    preds: &[(TurnKey, DialogueState)],
    golds: &[(TurnKey, DialogueState)],
    ontology: &Ontology,
    domains: &[String],
) -> Result<(usize, usize), EvalError> {
    let preds = keyed_states(preds)?;
    let golds = keyed_states(golds)?;
    check_same_keys(&preds, &golds)?;
    let mut correct = 0;
    let mut total = 0;
    for (key, pred) in &preds {
        let pred = pred.materialize();
        let gold = golds[*key].materialize();
        for domain in domains {
            for def in ontology.slots(domain)? {
                if def.informational {
                    continue;
                }
                total += 1;
                if pred.get(domain, &def.canonical) == gold.get(domain, &def.canonical) {
                    correct += 1;
                }
            }
        }
    }
    Ok((correct, total))
}

/// Fraction of correct (turn, slot) cells. Empty inputs score 1.0.
pub fn slot_accuracy(
    preds: &[(TurnKey, DialogueState)],
    golds: &[(TurnKey, DialogueState)],
    ontology: &Ontology,
    domains: &[String],
) -> Result<f64, EvalError> {
    let (correct, total) = slot_cells(preds, golds, ontology, domains)?;
    Ok(if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    })
}

/// Read-only pieces the benchmark shares across domains and workers.
pub struct BenchmarkDeps<'a> {
    pub ontology: &'a Ontology,
    pub templates: &'a TemplateSet,
    pub examples: &'a ExampleSet,
    pub backend: &'a dyn TranslationBackend,
}

#[derive(Debug, Clone)]
pub struct BenchmarkFlags {
    pub mode: PipelineMode,
    /// Score turns at and after a dialogue failure as empty predictions
    /// instead of aborting the benchmark.
    pub skip_errors: bool,
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for BenchmarkFlags {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Full,
            skip_errors: false,
            workers: 1,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq, Eq)]
pub struct DomainCounts {
    pub dialogues: usize,
    pub turns: usize,
    pub errored_turns: usize,
}

/// The benchmark result: per-domain joint goal accuracy, its unweighted
/// mean, and slot accuracy aggregated over every scored cell. Domains with
/// no matching dialogues are absent from the maps.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub per_domain_jga: BTreeMap<String, f64>,
    pub avg_jga: f64,
    pub slot_accuracy: f64,
    pub slot_correct: usize,
    pub slot_total: usize,
    pub dialogues: usize,
    pub turns: usize,
    pub errored_turns: usize,
    pub per_domain_counts: BTreeMap<String, DomainCounts>,
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    dialogue_id: &'a str,
    turn: usize,
    state: &'a DialogueState,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    dialogue_id: &'a str,
    #[serde(flatten)]
    record: &'a TurnRecord,
}

type DialogueResult = Result<DialogueRun, Box<DialogueFailure>>;

/// Runs the dialogues of one domain scope through the pipeline, up to
/// `workers` at a time. Results come back in corpus order.
fn run_dialogues_pooled(
    corpus: &[CorpusDialogue],
    deps: &PipelineDeps,
    workers: usize,
) -> Vec<DialogueResult> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<DialogueResult>>> =
        corpus.iter().map(|_| Mutex::new(None)).collect();
    let worker_count = workers.max(1).min(corpus.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= corpus.len() {
                    break;
                }
                let dialogue = &corpus[idx];
                let turns: Vec<(String, String)> = dialogue
                    .turns
                    .iter()
                    .map(|t| (t.system_utterance.clone(), t.user_utterance.clone()))
                    .collect();
                let result = run_dialogue(&dialogue.dialogue_id, &turns, deps);
                *slots[idx].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap()
                .expect("worker filled every slot")
        })
        .collect()
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    for line in lines {
        writeln!(file, "{line}").map_err(io_err)?;
    }
    Ok(())
}

/// Scores every requested domain scope independently and aggregates. When
/// an output directory is given, writes per-domain predictions and traces
/// plus the final report.
pub fn run_benchmark(
    corpus_path: &Path,
    domains: &[String],
    deps: &BenchmarkDeps,
    flags: &BenchmarkFlags,
) -> Result<MetricsReport, EvalError> {
    if let Some(dir) = &flags.out_dir {
        fs::create_dir_all(dir).map_err(|source| EvalError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let mut report = MetricsReport {
        per_domain_jga: BTreeMap::new(),
        avg_jga: 0.0,
        slot_accuracy: 0.0,
        slot_correct: 0,
        slot_total: 0,
        dialogues: 0,
        turns: 0,
        errored_turns: 0,
        per_domain_counts: BTreeMap::new(),
    };
    for domain in domains {
        let corpus = load_corpus(corpus_path, domain, deps.ontology)?;
        if corpus.is_empty() {
            continue;
        }
        let scope = vec![domain.clone()];
        let pipeline_deps = PipelineDeps {
            ontology: deps.ontology,
            templates: deps.templates,
            examples: deps.examples,
            backend: deps.backend,
            domains: scope.clone(),
            mode: flags.mode,
        };
        let results = run_dialogues_pooled(&corpus, &pipeline_deps, flags.workers);

        let mut counts = DomainCounts {
            dialogues: corpus.len(),
            ..DomainCounts::default()
        };
        let mut preds: Vec<(TurnKey, DialogueState)> = Vec::new();
        let mut golds: Vec<(TurnKey, DialogueState)> = Vec::new();
        let mut prediction_lines = Vec::new();
        let mut trace_lines = Vec::new();
        for (dialogue, result) in corpus.iter().zip(results) {
            let completed = match result {
                Ok(run) => run.turns,
                Err(failure) => {
                    if !flags.skip_errors {
                        return Err(EvalError::Dialogue {
                            id: dialogue.dialogue_id.clone(),
                            source: failure.error,
                        });
                    }
                    log::warn!(
                        "scoring {} from its failure point as empty: {}",
                        dialogue.dialogue_id,
                        failure.error
                    );
                    failure.partial.turns
                }
            };
            for record in &completed {
                trace_lines.push(
                    serde_json::to_string(&TraceLine {
                        dialogue_id: &dialogue.dialogue_id,
                        record,
                    })
                    .expect("turn record serializes"),
                );
            }
            for gold in &dialogue.turns {
                let key = (dialogue.dialogue_id.clone(), gold.turn_index);
                // Completed turns are a prefix, so a missing index means the
                // dialogue failed at or before this turn.
                let pred = match completed.get(gold.turn_index - 1) {
                    Some(record) => record.final_state.materialize().project(&scope),
                    None => {
                        counts.errored_turns += 1;
                        DialogueState::new()
                    }
                };
                prediction_lines.push(
                    serde_json::to_string(&PredictionLine {
                        dialogue_id: &dialogue.dialogue_id,
                        turn: gold.turn_index,
                        state: &pred,
                    })
                    .expect("state serializes"),
                );
                preds.push((key.clone(), pred));
                golds.push((key, gold.gold_state.clone()));
            }
            counts.turns += dialogue.turns.len();
        }

        let jga = joint_goal_accuracy(&preds, &golds)?;
        let (correct, total) = slot_cells(&preds, &golds, deps.ontology, &scope)?;
        report.per_domain_jga.insert(domain.clone(), jga);
        report.per_domain_counts.insert(domain.clone(), counts);
        report.slot_correct += correct;
        report.slot_total += total;
        report.dialogues += counts.dialogues;
        report.turns += counts.turns;
        report.errored_turns += counts.errored_turns;

        if let Some(dir) = &flags.out_dir {
            write_lines(
                &dir.join(format!("predictions.{domain}.ndjson")),
                &prediction_lines,
            )?;
            write_lines(&dir.join(format!("trace.{domain}.ndjson")), &trace_lines)?;
        }
    }
    if !report.per_domain_jga.is_empty() {
        report.avg_jga =
            report.per_domain_jga.values().sum::<f64>() / report.per_domain_jga.len() as f64;
    }
    report.slot_accuracy = if report.slot_total == 0 {
        1.0
    } else {
        report.slot_correct as f64 / report.slot_total as f64
    };
    if let Some(dir) = &flags.out_dir {
        let path = dir.join("report.json");
        let body = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&path, body).map_err(|source| EvalError::Io { path, source })?;
    }
    Ok(report)
}

/// The human-readable view of a report, one row per scored domain.
pub fn format_report_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>9} {:>6} {:>7} {:>8}\n",
        "domain", "dialogues", "turns", "errors", "JGA"
    ));
    for (domain, jga) in &report.per_domain_jga {
        let counts = report
            .per_domain_counts
            .get(domain)
            .copied()
            .unwrap_or_default();
        out.push_str(&format!(
            "{:<12} {:>9} {:>6} {:>7} {:>8.4}\n",
            domain, counts.dialogues, counts.turns, counts.errored_turns, jga
        ));
    }
    out.push_str(&format!("average JGA: {:.4}\n", report.avg_jga));
    out.push_str(&format!(
        "slot accuracy: {:.4} ({}/{})\n",
        report.slot_accuracy, report.slot_correct, report.slot_total
    ));
    out
}
