//! The generation half of translation: send one prompt, get one completion.
//! Two interchangeable backends: a remote OpenAI-compatible chat client and
//! a deterministic replay backend keyed by prompt hash. Remote completions
//! are appended to a cache file in the replay fixture format, so any live
//! run can be replayed afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::STOP_TOKEN;

/// SHA-256 of the exact prompt string, lowercase hex. Fixture files and
/// the completion cache are keyed by this.
pub fn prompt_key(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no fixture for prompt {key}, prompt starts: {preview:?}")]
    FixtureMiss { key: String, preview: String },
    #[error("fixture file not found: {0}")]
    MissingFixtureFile(PathBuf),
    #[error("bad fixture {path} line {line}: {reason}")]
    BadFixture {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid backend config: {0}")]
    BadConfig(String),
    #[error("request failed after {attempts} attempt(s), status {status:?}: {message}")]
    RemoteError {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("cannot write completion cache {path}: {source}")]
    CacheIo {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Replay,
}

/// Configuration shared by both backends. Temperature stays 0 unless
/// explicitly overridden; the stop sequence is the demo terminator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model: String,
    pub endpoint: String,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub max_retries: u32,
    pub retry_base_delay: Duration,
    pub timeout: Duration,
    pub fixture_path: Option<PathBuf>,
    /// When set, every remote completion is appended here as a replay
    /// fixture record.
    pub cache_path: Option<PathBuf>,
    pub max_in_flight: usize,
    /// Prompts longer than this (in chars) are flagged in the log; no
    /// truncation is attempted.
    pub warn_prompt_chars: usize,
}

impl BackendConfig {
    pub fn replay(fixture_path: PathBuf) -> Self {
        Self {
            kind: BackendKind::Replay,
            fixture_path: Some(fixture_path),
            ..Self::remote(
                "gpt-3.5-turbo",
                "https://api.openai.com/v1/chat/completions",
            )
        }
    }

    pub fn remote(model: &str, endpoint: &str) -> Self {
        Self {
            kind: BackendKind::Remote,
            model: model.to_string(),
            endpoint: endpoint.to_string(),
            temperature: 0.0,
            stop: vec![STOP_TOKEN.to_string()],
            max_retries: 3,
            retry_base_delay: Duration::from_millis(250),
            timeout: Duration::from_secs(60),
            fixture_path: None,
            cache_path: None,
            max_in_flight: 4,
            warn_prompt_chars: 24_000,
        }
    }
}

/// One prompt in, one completion out. Implementations must be callable
/// from multiple worker threads.
pub trait TranslationBackend: Send + Sync {
    fn translate(&self, prompt: &str) -> Result<String, BackendError>;
}

pub fn make_backend(cfg: &BackendConfig) -> Result<Box<dyn TranslationBackend>, BackendError> {
    match cfg.kind {
        BackendKind::Replay => {
            let path = cfg.fixture_path.as_ref().ok_or_else(|| {
                BackendError::BadConfig("replay backend requires a fixture path".into())
            })?;
            Ok(Box::new(ReplayBackend::load(path)?))
        }
        BackendKind::Remote => Ok(Box::new(RemoteBackend::new(cfg.clone())?)),
    }
}

/// One recorded (prompt hash, completion) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayFixture {
    pub key: String,
    pub completion: String,
    #[serde(default)]
    pub meta: Value,
}

/// Pure function of (prompt, fixture file): completions looked up by
/// prompt hash, never the network.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    fixtures: BTreeMap<String, String>,
}

impl ReplayBackend {
    /// Loads newline-delimited fixture records. A repeated key with an
    /// identical completion is tolerated (cache files concatenate);
    /// conflicting completions are an error.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        if !path.is_file() {
            return Err(BackendError::MissingFixtureFile(path.to_path_buf()));
        }
        let raw = fs::read_to_string(path).map_err(|e| BackendError::BadFixture {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })?;
        let mut fixtures = BTreeMap::new();
        for (idx, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ReplayFixture =
                serde_json::from_str(line).map_err(|e| BackendError::BadFixture {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    reason: e.to_string(),
                })?;
            match fixtures.get(&record.key) {
                Some(existing) if *existing != record.completion => {
                    return Err(BackendError::BadFixture {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        reason: format!("conflicting completion for key {}", record.key),
                    });
                }
                _ => {
                    fixtures.insert(record.key, record.completion);
                }
            }
        }
        Ok(Self { fixtures })
    }

    pub fn from_records(records: impl IntoIterator<Item = ReplayFixture>) -> Self {
        Self {
            fixtures: records.into_iter().map(|r| (r.key, r.completion)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl TranslationBackend for ReplayBackend {
    fn translate(&self, prompt: &str) -> Result<String, BackendError> {
        let key = prompt_key(prompt);
        self.fixtures
            .get(&key)
            .cloned()
            .ok_or_else(|| BackendError::FixtureMiss {
                key,
                preview: prompt.chars().take(120).collect(),
            })
    }
}

/// Counting gate bounding concurrent remote requests.
struct Gate {
    active: Mutex<usize>,
    cv: Condvar,
    max: usize,
}

struct GatePermit<'a>(&'a Gate);

impl Gate {
    fn new(max: usize) -> Self {
        Self {
            active: Mutex::new(0),
            cv: Condvar::new(),
            max: max.max(1),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.cv.wait(active).unwrap();
        }
        *active += 1;
        GatePermit(self)
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

/// Append-only completion cache in the replay fixture format, deduped by
/// key within and across runs.
struct CacheWriter {
    path: PathBuf,
    file: fs::File,
    seen: BTreeSet<String>,
}

impl CacheWriter {
    fn open(path: &Path) -> Result<Self, BackendError> {
        let io_err = |source| BackendError::CacheIo {
            path: path.to_path_buf(),
            source,
        };
        let mut seen = BTreeSet::new();
        if path.is_file() {
            let raw = fs::read_to_string(path).map_err(io_err)?;
            for line in raw.lines().filter(|l| !l.trim().is_empty()) {
                if let Ok(record) = serde_json::from_str::<ReplayFixture>(line) {
                    seen.insert(record.key);
                }
            }
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            seen,
        })
    }

    fn record(&mut self, key: &str, completion: &str, model: &str) -> Result<(), BackendError> {
        if self.seen.contains(key) {
            return Ok(());
        }
        let record = ReplayFixture {
            key: key.to_string(),
            completion: completion.to_string(),
            meta: json!({ "model": model }),
        };
        let mut line = serde_json::to_string(&record).expect("fixture record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|()| self.file.flush())
            .map_err(|source| BackendError::CacheIo {
                path: self.path.clone(),
                source,
            })?;
        self.seen.insert(key.to_string());
        Ok(())
    }
}

enum Failure {
    Transient {
        timed_out: bool,
        status: Option<u16>,
        message: String,
    },
    Fatal {
        status: Option<u16>,
        message: String,
    },
}

/// OpenAI-compatible chat-completions client. The prompt travels as a
/// single user-role message; the bearer token comes from the LLM_API_KEY
/// environment variable and is never logged or persisted.
pub struct RemoteBackend {
    cfg: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    cache: Option<Mutex<CacheWriter>>,
    gate: Gate,
}

impl RemoteBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var("LLM_API_KEY").ok();
        Self::with_api_key(cfg, api_key)
    }

    pub(crate) fn with_api_key(
        cfg: BackendConfig,
        api_key: Option<String>,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::BadConfig(e.to_string()))?;
        let cache = match &cfg.cache_path {
            Some(path) => Some(Mutex::new(CacheWriter::open(path)?)),
            None => None,
        };
        let gate = Gate::new(cfg.max_in_flight);
        Ok(Self {
            cfg,
            client,
            api_key,
            cache,
            gate,
        })
    }

    fn request_once(&self, prompt: &str) -> Result<String, Failure> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": self.cfg.temperature,
            "stop": self.cfg.stop,
        });
        let mut request = self.client.post(&self.cfg.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Failure::Transient {
            timed_out: e.is_timeout(),
            status: None,
            message: scrub(&e.to_string()),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| Failure::Transient {
            timed_out: e.is_timeout(),
            status: Some(status.as_u16()),
            message: scrub(&e.to_string()),
        })?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Transient {
                timed_out: false,
                status: Some(status.as_u16()),
                message: truncate(&text, 200),
            });
        }
        if !status.is_success() {
            return Err(Failure::Fatal {
                status: Some(status.as_u16()),
                message: truncate(&text, 200),
            });
        }
        extract_completion(&text).ok_or_else(|| Failure::Fatal {
            status: Some(status.as_u16()),
            message: format!("no completion text in response: {}", truncate(&text, 200)),
        })
    }
}

/// Accepts both response shapes: chat (`choices[0].message.content`) and
/// legacy completion (`choices[0].text`).
fn extract_completion(text: &str) -> Option<String> {
    let value: Value = serde_json::from_str(text).ok()?;
    let choice = value.get("choices")?.get(0)?;
    choice
        .get("message")
        .and_then(|m| m.get("content"))
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

fn truncate(text: &str, max_chars: usize) -> String {
    text.chars().take(max_chars).collect()
}

/// Transport errors can echo the request URL; keep messages loggable by
/// never including header material (reqwest already omits it).
fn scrub(message: &str) -> String {
    truncate(message, 300)
}

impl TranslationBackend for RemoteBackend {
    fn translate(&self, prompt: &str) -> Result<String, BackendError> {
        if prompt.chars().count() > self.cfg.warn_prompt_chars {
            log::warn!(
                "prompt is {} chars, over the {} char advisory limit",
                prompt.chars().count(),
                self.cfg.warn_prompt_chars
            );
        }
        let _permit = self.gate.acquire();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.request_once(prompt) {
                Ok(completion) => {
                    if let Some(cache) = &self.cache {
                        cache.lock().unwrap().record(
                            &prompt_key(prompt),
                            &completion,
                            &self.cfg.model,
                        )?;
                    }
                    return Ok(completion);
                }
                Err(Failure::Transient {
                    timed_out,
                    status,
                    message,
                }) => {
                    if attempt > self.cfg.max_retries {
                        return Err(if timed_out {
                            BackendError::Timeout { attempts: attempt }
                        } else {
                            BackendError::RemoteError {
                                attempts: attempt,
                                status,
                                message,
                            }
                        });
                    }
                    log::debug!("attempt {attempt} failed ({message}), backing off");
                    std::thread::sleep(backoff_delay(self.cfg.retry_base_delay, attempt));
                }
                Err(Failure::Fatal { status, message }) => {
                    return Err(BackendError::RemoteError {
                        attempts: attempt,
                        status,
                        message,
                    });
                }
            }
        }
    }
}

/// Exponential backoff with uniform jitter of up to one base delay,
/// capped at 30 s per wait.
fn backoff_delay(base: Duration, attempt: u32) -> Duration {
    let exp = base.saturating_mul(1u32 << (attempt - 1).min(16));
    let jitter = base.mul_f64(rand::thread_rng().gen_range(0.0..1.0));
    (exp + jitter).min(Duration::from_secs(30))
}
