//! `dst` command-line interface: score a corpus, inspect a built prompt,
//! or replay a single dialogue with full turn-by-turn output.
//!
//! Exit codes are a stable contract: 0 success, 1 usage or configuration
//! error, 2 a dialogue failed at runtime.

use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use dst_core::{
    format_report_table, make_backend, run_benchmark, run_dialogue, state_to_context_json,
    BackendConfig, BenchmarkDeps, BenchmarkFlags, DialogueState, EvalError, ExampleSet, Ontology,
    PipelineDeps, PipelineMode, Speaker, TemplateSet, TranslationBackend,
};

#[derive(Parser)]
#[command(
    name = "dst",
    version,
    about = "Zero-shot dialogue state tracking by translating utterances to JSON"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a corpus through the pipeline and score it against gold states
    Eval(EvalArgs),
    /// Print the fully substituted prompt for one utterance
    InspectPrompt(InspectPromptArgs),
    /// Run one dialogue and print every turn record
    RunDialogue(RunDialogueArgs),
}

#[derive(Args)]
struct ResourceArgs {
    /// Ontology JSON file (defaults to the built-in five-domain ontology)
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Directory containing system.txt and user.txt prompt templates
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Directory of per-domain formatting example JSON files
    #[arg(long)]
    examples: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendChoice {
    /// Call an OpenAI-compatible chat completions endpoint
    Remote,
    /// Serve completions from a recorded fixture file
    Replay,
}

#[derive(Args)]
struct BackendArgs {
    /// Translation backend
    #[arg(long, value_enum)]
    backend: BackendChoice,
    /// Fixture NDJSON file (required with --backend replay)
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Model name for the remote backend
    #[arg(long, default_value = "gpt-3.5-turbo")]
    model: String,
    /// Chat completions URL for the remote backend
    #[arg(long, default_value = "https://api.openai.com/v1/chat/completions")]
    endpoint: String,
    /// Append every remote completion to this NDJSON cache (replayable
    /// later via --backend replay --fixtures)
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct ModeArgs {
    /// Keep the unfiltered system payload in the user-side context
    #[arg(long, conflicts_with = "no_framework")]
    no_filter: bool,
    /// Collapse each turn to a single merged translation call
    #[arg(long)]
    no_framework: bool,
}

impl ModeArgs {
    fn mode(&self) -> PipelineMode {
        if self.no_framework {
            PipelineMode::NoFramework
        } else if self.no_filter {
            PipelineMode::NoFilter
        } else {
            PipelineMode::Full
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus file in the MultiWOZ export format
    #[arg(long)]
    corpus: PathBuf,
    /// Domain to score, or "all" for every ontology domain
    #[arg(long)]
    domain: String,
    #[command(flatten)]
    backend: BackendArgs,
    /// Directory for predictions, traces, and report.json
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    mode: ModeArgs,
    /// Dialogues run in parallel
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Score turns after a dialogue failure as empty predictions instead
    /// of aborting
    #[arg(long)]
    skip_errors: bool,
    #[command(flatten)]
    resources: ResourceArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SideChoice {
    User,
    System,
}

#[derive(Args)]
struct InspectPromptArgs {
    /// Which template to render
    #[arg(long, value_enum)]
    side: SideChoice,
    /// Domain scope; repeat the flag for a multi-domain prompt
    #[arg(long, required = true)]
    domain: Vec<String>,
    /// Prior dialogue state as JSON, e.g. '{"restaurant":{"area":"centre"}}'
    #[arg(long, default_value = "{}")]
    state: String,
    /// The utterance to translate
    #[arg(long)]
    utterance: String,
    #[command(flatten)]
    resources: ResourceArgs,
}

#[derive(Args)]
struct RunDialogueArgs {
    /// JSON file holding a list of {"system": "...", "user": "..."} turns
    #[arg(long)]
    turns: PathBuf,
    /// Dialogue id used in output and error messages
    #[arg(long, default_value = "dialogue")]
    id: String,
    /// Domain scope; repeat the flag for a multi-domain dialogue
    #[arg(long, required = true)]
    domain: Vec<String>,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    mode: ModeArgs,
    #[command(flatten)]
    resources: ResourceArgs,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnEntry {
    #[serde(default)]
    system: String,
    user: String,
}

/// An error plus the exit code it maps to.
struct Failure {
    code: i32,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

struct Resources {
    ontology: Ontology,
    templates: TemplateSet,
    examples: ExampleSet,
}

fn load_resources(args: &ResourceArgs) -> anyhow::Result<Resources> {
    let ontology = match &args.ontology {
        Some(path) => Ontology::load(path)?,
        None => Ontology::default_builtin(),
    };
    let templates = match &args.templates {
        Some(dir) => TemplateSet::load(dir)?,
        None => TemplateSet::default_builtin(),
    };
    let examples = match &args.examples {
        Some(dir) => ExampleSet::load(dir)?,
        None => ExampleSet::default_builtin(),
    };
    examples
        .validate(&ontology)
        .context("formatting examples do not match the ontology")?;
    Ok(Resources {
        ontology,
        templates,
        examples,
    })
}

fn build_backend(args: &BackendArgs) -> anyhow::Result<Box<dyn TranslationBackend>> {
    let cfg = match args.backend {
        BackendChoice::Replay => {
            let path = args
                .fixtures
                .clone()
                .ok_or_else(|| anyhow!("--fixtures is required with --backend replay"))?;
            BackendConfig::replay(path)
        }
        BackendChoice::Remote => {
            let mut cfg = BackendConfig::remote(&args.model, &args.endpoint);
            cfg.cache_path = args.cache.clone();
            cfg
        }
    };
    Ok(make_backend(&cfg)?)
}

/// Expands "all" and checks every named domain against the ontology.
fn resolve_domains(requested: &[String], ontology: &Ontology) -> anyhow::Result<Vec<String>> {
    if requested.iter().any(|d| d == "all") {
        if requested.len() > 1 {
            return Err(anyhow!(
                "--domain all cannot be combined with named domains"
            ));
        }
        return Ok(ontology.domains().iter().map(|d| d.name.clone()).collect());
    }
    for domain in requested {
        if !ontology.has_domain(domain) {
            return Err(anyhow!(
                "unknown domain {domain:?}; the ontology defines: {}",
                ontology
                    .domains()
                    .iter()
                    .map(|d| d.name.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
    }
    Ok(requested.to_vec())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    let resources = load_resources(&args.resources).map_err(usage)?;
    let domains =
        resolve_domains(std::slice::from_ref(&args.domain), &resources.ontology).map_err(usage)?;
    let backend = build_backend(&args.backend).map_err(usage)?;
    let deps = BenchmarkDeps {
        ontology: &resources.ontology,
        templates: &resources.templates,
        examples: &resources.examples,
        backend: backend.as_ref(),
    };
    let flags = BenchmarkFlags {
        mode: args.mode.mode(),
        skip_errors: args.skip_errors,
        workers: args.workers,
        out_dir: args.out.clone(),
    };
    let report = run_benchmark(&args.corpus, &domains, &deps, &flags).map_err(|e| match e {
        EvalError::Dialogue { .. } => runtime(e),
        other => usage(other),
    })?;
    print!("{}", format_report_table(&report));
    Ok(())
}

fn cmd_inspect_prompt(args: &InspectPromptArgs) -> Result<(), Failure> {
    let resources = load_resources(&args.resources).map_err(usage)?;
    let domains = resolve_domains(&args.domain, &resources.ontology).map_err(usage)?;
    let state: DialogueState = serde_json::from_str(&args.state)
        .map_err(|e| usage(anyhow!("--state is not a valid state JSON: {e}")))?;
    state.validate(&resources.ontology).map_err(usage)?;
    let side = match args.side {
        SideChoice::User => Speaker::User,
        SideChoice::System => Speaker::System,
    };
    let ctx = state_to_context_json(&state, &resources.ontology);
    let prompt = resources
        .templates
        .build_prompt(
            side,
            &domains,
            &ctx,
            &args.utterance,
            &resources.ontology,
            &resources.examples,
        )
        .map_err(usage)?;
    print!("{prompt}");
    Ok(())
}

fn cmd_run_dialogue(args: &RunDialogueArgs) -> Result<(), Failure> {
    let resources = load_resources(&args.resources).map_err(usage)?;
    let domains = resolve_domains(&args.domain, &resources.ontology).map_err(usage)?;
    let raw = fs::read_to_string(&args.turns)
        .with_context(|| format!("cannot read turns file {}", args.turns.display()))
        .map_err(usage)?;
    let entries: Vec<TurnEntry> = serde_json::from_str(&raw)
        .map_err(|e| usage(anyhow!("turns file is not a list of turns: {e}")))?;
    if entries.is_empty() {
        return Err(usage(anyhow!(
            "turns file {} contains no turns",
            args.turns.display()
        )));
    }
    let turns: Vec<(String, String)> = entries.into_iter().map(|t| (t.system, t.user)).collect();
    let backend = build_backend(&args.backend).map_err(usage)?;
    let deps = PipelineDeps {
        ontology: &resources.ontology,
        templates: &resources.templates,
        examples: &resources.examples,
        backend: backend.as_ref(),
        domains,
        mode: args.mode.mode(),
    };
    let run = run_dialogue(&args.id, &turns, &deps).map_err(|failure| {
        for record in &failure.partial.turns {
            eprintln!("completed turn {} before the failure", record.turn_index);
        }
        runtime(anyhow!("{}", failure.error))
    })?;
    for record in &run.turns {
        println!(
            "{}",
            serde_json::to_string_pretty(record).expect("turn record serializes")
        );
    }
    let final_state = &run.turns.last().expect("dialogue has turns").final_state;
    println!(
        "final state: {}",
        serde_json::to_string(final_state).expect("state serializes")
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Eval(args) => cmd_eval(args),
        Command::InspectPrompt(args) => cmd_inspect_prompt(args),
        Command::RunDialogue(args) => cmd_run_dialogue(args),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests print to stdout and succeed; real
            // parse errors are usage errors.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(failure) = run(&cli) {
        eprintln!("error: {:#}", failure.error);
        std::process::exit(failure.code);
    }
}
