//! Prompt assembly. The two translation templates are external text assets
//! carrying literal placeholder tokens; building a prompt substitutes each
//! token once and fails hard if any token survives.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{serialize_context, ContextJson};
use crate::ontology::{Ontology, OntologyError};
use crate::payload::{parse_user_json, Speaker};

/// Stop sequence terminating every completion and every in-template demo.
pub const STOP_TOKEN: &str = "[END]";

pub const TOKEN_DOMAINS: &str = "[DM]";
pub const TOKEN_EXAMPLE: &str = "[EXM]";
pub const TOKEN_SLOTS: &str = "[ST]";
pub const TOKEN_KEYWORDS: &str = "[KW]";
pub const TOKEN_CONTEXT: &str = "[PREDIC]";
pub const TOKEN_DIALOG: &str = "[DIALOG]";

/// Tokens that must be gone after substitution. `[END]` is not listed: it
/// is the stop sequence, not a placeholder.
pub const SUBSTITUTION_TOKENS: [&str; 6] = [
    TOKEN_DOMAINS,
    TOKEN_EXAMPLE,
    TOKEN_SLOTS,
    TOKEN_KEYWORDS,
    TOKEN_CONTEXT,
    TOKEN_DIALOG,
];

pub const DEFAULT_SYSTEM_TEMPLATE: &str = include_str!("../assets/templates/system.txt");
pub const DEFAULT_USER_TEMPLATE: &str = include_str!("../assets/templates/user.txt");

const DEFAULT_DOMAIN_EXAMPLES: [&str; 5] = [
    include_str!("../assets/domain_examples/attraction.json"),
    include_str!("../assets/domain_examples/hotel.json"),
    include_str!("../assets/domain_examples/restaurant.json"),
    include_str!("../assets/domain_examples/taxi.json"),
    include_str!("../assets/domain_examples/train.json"),
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template file not found: {0}")]
    MissingFile(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{side} template must contain {token} exactly once, found {count}")]
    TokenCount {
        side: &'static str,
        token: &'static str,
        count: usize,
    },
    #[error("{side} template must not contain {token}")]
    ForbiddenToken {
        side: &'static str,
        token: &'static str,
    },
    #[error("no domain example for {0}")]
    MissingExample(String),
    #[error("unresolved template token {0} in built prompt")]
    UnresolvedToken(String),
    #[error("domain example for {domain} is invalid: {reason}")]
    BadExample { domain: String, reason: String },
    #[error("bad example fixture {path}: {reason}")]
    BadFixture { path: PathBuf, reason: String },
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

/// One side's template text. The body keeps its placeholder tokens until
/// build time.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub side: Speaker,
    pub body: String,
    pub stop_token: String,
}

impl PromptTemplate {
    pub fn new(side: Speaker, body: String) -> Result<Self, PromptError> {
        for token in required_tokens(side) {
            let count = body.matches(token).count();
            if count != 1 {
                return Err(PromptError::TokenCount {
                    side: side.key(),
                    token,
                    count,
                });
            }
        }
        if side == Speaker::System && body.contains(TOKEN_EXAMPLE) {
            return Err(PromptError::ForbiddenToken {
                side: side.key(),
                token: TOKEN_EXAMPLE,
            });
        }
        Ok(Self {
            side,
            body,
            stop_token: STOP_TOKEN.to_string(),
        })
    }
}

/// Placeholder tokens each side must carry exactly once. The example token
/// belongs to the user template only.
fn required_tokens(side: Speaker) -> &'static [&'static str] {
    match side {
        Speaker::System => &[
            TOKEN_DOMAINS,
            TOKEN_SLOTS,
            TOKEN_KEYWORDS,
            TOKEN_CONTEXT,
            TOKEN_DIALOG,
        ],
        Speaker::User => &[
            TOKEN_DOMAINS,
            TOKEN_EXAMPLE,
            TOKEN_SLOTS,
            TOKEN_KEYWORDS,
            TOKEN_CONTEXT,
            TOKEN_DIALOG,
        ],
    }
}

/// A user utterance exercising every non-informational slot of one domain,
/// plus its translation. Substituted for the example token, formatted like
/// the fixed demos. The translation is kept as a string so the fixture
/// author controls the exact bytes entering the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainExample {
    pub domain: String,
    pub utterance: String,
    pub json: String,
}

impl DomainExample {
    /// The translation must parse cleanly and its request/reject keys must
    /// cover every non-informational slot of the domain.
    pub fn validate(&self, ontology: &Ontology) -> Result<(), PromptError> {
        let bad = |reason: String| PromptError::BadExample {
            domain: self.domain.clone(),
            reason,
        };
        let parsed = parse_user_json(&self.json, ontology)
            .map_err(|e| bad(format!("translation does not parse: {e}")))?;
        if let Some(warning) = parsed.warnings.first() {
            return Err(bad(format!("translation parses with warning: {warning}")));
        }
        let mut covered: Vec<&str> = Vec::new();
        if let Some(slots) = parsed.value.request.get(&self.domain) {
            covered.extend(slots.keys().map(String::as_str));
        }
        if let Some(slots) = parsed.value.reject.get(&self.domain) {
            covered.extend(slots.iter().map(String::as_str));
        }
        for def in ontology.slots(&self.domain)? {
            if !def.informational && !covered.contains(&def.surrogate.as_str()) {
                return Err(bad(format!("slot {} is not covered", def.surrogate)));
            }
        }
        Ok(())
    }
}

/// Domain examples indexed by domain name.
#[derive(Debug, Clone, Default)]
pub struct ExampleSet {
    by_domain: BTreeMap<String, DomainExample>,
}

impl ExampleSet {
    /// The examples shipped with the crate, one per built-in domain.
    pub fn default_builtin() -> Self {
        let mut set = Self::default();
        for raw in DEFAULT_DOMAIN_EXAMPLES {
            let example: DomainExample =
                serde_json::from_str(raw).expect("built-in domain example must parse");
            set.insert(example);
        }
        set
    }

    /// Loads every `*.json` file in a directory as one DomainExample.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        if !dir.is_dir() {
            return Err(PromptError::MissingFile(dir.to_path_buf()));
        }
        let mut set = Self::default();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|source| PromptError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let raw = fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.clone(),
                source,
            })?;
            let example: DomainExample =
                serde_json::from_str(&raw).map_err(|e| PromptError::BadFixture {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            if set.by_domain.contains_key(&example.domain) {
                return Err(PromptError::BadFixture {
                    path,
                    reason: format!("duplicate example for domain {}", example.domain),
                });
            }
            set.insert(example);
        }
        Ok(set)
    }

    pub fn insert(&mut self, example: DomainExample) {
        self.by_domain.insert(example.domain.clone(), example);
    }

    pub fn get(&self, domain: &str) -> Option<&DomainExample> {
        self.by_domain.get(domain)
    }

    pub fn validate(&self, ontology: &Ontology) -> Result<(), PromptError> {
        for example in self.by_domain.values() {
            example.validate(ontology)?;
        }
        Ok(())
    }
}

/// Both templates, loaded and validated together.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub system: PromptTemplate,
    pub user: PromptTemplate,
}

impl TemplateSet {
    /// The templates shipped with the crate.
    pub fn default_builtin() -> Self {
        Self::from_bodies(
            DEFAULT_SYSTEM_TEMPLATE.to_string(),
            DEFAULT_USER_TEMPLATE.to_string(),
        )
        .expect("built-in templates must validate")
    }

    pub fn from_bodies(system: String, user: String) -> Result<Self, PromptError> {
        Ok(Self {
            system: PromptTemplate::new(Speaker::System, system)?,
            user: PromptTemplate::new(Speaker::User, user)?,
        })
    }

    /// Loads `system.txt` and `user.txt` from a directory.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| -> Result<String, PromptError> {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(PromptError::MissingFile(path));
            }
            fs::read_to_string(&path).map_err(|source| PromptError::Io { path, source })
        };
        Self::from_bodies(read("system.txt")?, read("user.txt")?)
    }

    /// Substitutes every placeholder token for one side. Each substitution
    /// happens exactly once; the result is scanned so no token survives,
    /// including tokens smuggled in through the utterance or context.
    pub fn build_prompt(
        &self,
        side: Speaker,
        domains: &[String],
        ctx: &ContextJson,
        utterance: &str,
        ontology: &Ontology,
        examples: &ExampleSet,
    ) -> Result<String, PromptError> {
        self.build_prompt_with_dialog(
            side,
            domains,
            ctx,
            &format!("{}: \"{}\"", side.key(), utterance),
            ontology,
            examples,
        )
    }

    /// Like build_prompt but with a caller-formatted dialog section, for
    /// prompts carrying more than one utterance line.
    pub fn build_prompt_with_dialog(
        &self,
        side: Speaker,
        domains: &[String],
        ctx: &ContextJson,
        dialog: &str,
        ontology: &Ontology,
        examples: &ExampleSet,
    ) -> Result<String, PromptError> {
        let template = match side {
            Speaker::System => &self.system,
            Speaker::User => &self.user,
        };
        let mut out = template
            .body
            .replacen(TOKEN_DOMAINS, &render_domains(domains), 1);
        if side == Speaker::User {
            out = out.replacen(TOKEN_EXAMPLE, &render_examples(domains, examples)?, 1);
        }
        out = out.replacen(TOKEN_SLOTS, &render_slots(domains, ontology)?, 1);
        out = out.replacen(TOKEN_KEYWORDS, &render_keywords(domains, ontology)?, 1);
        out = out.replacen(TOKEN_CONTEXT, &serialize_context(ctx, ontology), 1);
        out = out.replacen(TOKEN_DIALOG, dialog, 1);
        for token in SUBSTITUTION_TOKENS {
            if out.contains(token) {
                return Err(PromptError::UnresolvedToken(token.to_string()));
            }
        }
        Ok(out)
    }
}

fn render_domains(domains: &[String]) -> String {
    format!("domain: {}", domains.join(", "))
}

/// One line per domain listing its promptable slot names, informational
/// slots included (the fixed demos request phone_number and address).
fn render_slots(domains: &[String], ontology: &Ontology) -> Result<String, PromptError> {
    let mut lines = Vec::new();
    for domain in domains {
        let surrogates: Vec<&str> = ontology
            .slots(domain)?
            .iter()
            .map(|def| def.surrogate.as_str())
            .collect();
        lines.push(format!("slots of {}: {}", domain, surrogates.join(", ")));
    }
    Ok(lines.join("\n"))
}

/// One line per keyworded slot, `slot: choice1 | choice2 | ...`. Slots
/// shared across domains with identical choices render once.
fn render_keywords(domains: &[String], ontology: &Ontology) -> Result<String, PromptError> {
    let mut lines: Vec<String> = Vec::new();
    for domain in domains {
        for def in ontology.slots(domain)? {
            let Some(keywords) = &def.keywords else {
                continue;
            };
            let line = format!("{}: {}", def.surrogate, keywords.join(" | "));
            if !lines.contains(&line) {
                lines.push(line);
            }
        }
    }
    Ok(lines.join("\n"))
}

/// Renders each domain's example in the same shape as the fixed demos.
fn render_examples(domains: &[String], examples: &ExampleSet) -> Result<String, PromptError> {
    let mut blocks = Vec::new();
    for domain in domains {
        let example = examples
            .get(domain)
            .ok_or_else(|| PromptError::MissingExample(domain.clone()))?;
        blocks.push(format!(
            "example:\ninput message:\nuser: \"{}\"\noutput JSON:\n{}\n{}",
            example.utterance, example.json, STOP_TOKEN
        ));
    }
    Ok(blocks.join("\n\n"))
}
