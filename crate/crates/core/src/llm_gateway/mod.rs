//! Chat-completion client that only ever hands back schema-valid documents.
//!
//! [`Gateway`] sends a [`CompletionRequest`] through a [`Backend`], parses the
//! reply as JSON and validates it against the request's schema. Invalid
//! replies are retried up to `retry_limit` attempts in total; each retry
//! appends a user message naming the violated constraints. Backends:
//!
//! - [`LiveBackend`]: chat-completions over HTTP.
//! - [`RecordingBackend`]: any backend, with every reply persisted to a cassette.
//! - [`ReplayBackend`]: replies served from a cassette, no network access.
//! - [`SyntheticBackend`]: deterministic made-up stories for offline runs.
//! - [`ScriptedBackend`] / [`FnBackend`]: fixed or computed replies for tests.

mod cassette;
mod live;
mod mock;
mod synthetic;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::prompt_kit::{RenderedPrompt, SchemaSpec, Stage};

pub use cassette::{fingerprint, Cassette, CassetteEntry, RecordingBackend, ReplayBackend, CASSETTE_VERSION};
pub use live::LiveBackend;
pub use mock::{FnBackend, ScriptedBackend};
pub use synthetic::SyntheticBackend;

pub const DEFAULT_RETRY_LIMIT: u32 = 3;
pub const DEFAULT_MAX_CONCURRENT: usize = 2;
pub const DEFAULT_MODEL: &str = "gpt-4";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{stage} response violated its schema after {attempts} attempt(s): {}", violations.join("; "))]
    SchemaViolation {
        stage: Stage,
        attempts: u32,
        violations: Vec<String>,
        /// Last reply that parsed as JSON, if any.
        last_document: Option<Value>,
    },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("no cassette entry for request {fingerprint} ({stage})")]
    CassetteMiss { stage: Stage, fingerprint: String },
    #[error("cassette error: {0}")]
    Cassette(String),
    #[error("call budget of {limit} exhausted")]
    BudgetExceeded { limit: usize },
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// Model identity and decoding parameters shared by all calls of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub model_id: String,
    pub generation_temperature: f64,
    pub extraction_temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            model_id: DEFAULT_MODEL.to_string(),
            generation_temperature: 0.7,
            extraction_temperature: 0.0,
            max_output_tokens: 4096,
        }
    }
}

impl ModelSettings {
    pub fn temperature_for(&self, stage: Stage) -> f64 {
        if stage.is_extraction() {
            self.extraction_temperature
        } else {
            self.generation_temperature
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub schema: SchemaSpec,
    pub temperature: f64,
    pub model_id: String,
    pub max_output_tokens: u32,
}

impl CompletionRequest {
    pub fn new(prompt: RenderedPrompt, schema: SchemaSpec, settings: &ModelSettings) -> Self {
        CompletionRequest {
            messages: vec![Message::system(prompt.system), Message::user(prompt.user)],
            temperature: settings.temperature_for(schema.stage),
            schema,
            model_id: settings.model_id.clone(),
            max_output_tokens: settings.max_output_tokens,
        }
    }

    pub fn stage(&self) -> Stage {
        self.schema.stage
    }

    /// First system message, or `""`.
    pub fn system_text(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map_or("", |m| m.content.as_str())
    }

    /// First user message, or `""`.
    pub fn user_text(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }

    fn check(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("no user message".into()));
        }
        if !self.schema.schema_document.is_object() {
            return Err(GatewayError::InvalidRequest("schema is not an object".into()));
        }
        Ok(())
    }
}

/// A schema-valid reply.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub document: Value,
    /// Attempts used, including the successful one.
    pub attempts: u32,
}

/// Something that returns the raw text of a model reply.
pub trait Backend: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

/// Returns documents that validate against the request's schema.
pub trait StructuredCompleter: Send + Sync {
    fn complete_structured(&self, request: &CompletionRequest) -> Result<Completion, GatewayError>;
}

impl<T: StructuredCompleter + ?Sized> StructuredCompleter for &T {
    fn complete_structured(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        (**self).complete_structured(request)
    }
}

impl<T: StructuredCompleter + ?Sized> StructuredCompleter for Arc<T> {
    fn complete_structured(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        (**self).complete_structured(request)
    }
}

/// Counting semaphore capping concurrent backend calls.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(count: usize) -> Self {
        Permits {
            free: Mutex::new(count.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    retry_limit: u32,
    permits: Permits,
}

impl Gateway {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Gateway {
            backend: Box::new(backend),
            retry_limit: DEFAULT_RETRY_LIMIT,
            permits: Permits::new(DEFAULT_MAX_CONCURRENT),
        }
    }

    pub fn from_boxed(backend: Box<dyn Backend>) -> Self {
        Gateway {
            backend,
            retry_limit: DEFAULT_RETRY_LIMIT,
            permits: Permits::new(DEFAULT_MAX_CONCURRENT),
        }
    }

    pub fn with_retry_limit(mut self, retry_limit: u32) -> Self {
        self.retry_limit = retry_limit.max(1);
        self
    }

    pub fn with_max_concurrent(mut self, max_concurrent: usize) -> Self {
        self.permits = Permits::new(max_concurrent);
        self
    }

    pub fn retry_limit(&self) -> u32 {
        self.retry_limit
    }
}

type SharedValidator = Arc<jsonschema::Validator>;

fn validator_for(schema: &SchemaSpec) -> Result<SharedValidator, GatewayError> {
    static CACHE: OnceLock<Mutex<HashMap<String, SharedValidator>>> = OnceLock::new();
    let key = schema.schema_document.to_string();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(v) = cache.lock().expect("validator cache").get(&key) {
        return Ok(v.clone());
    }
    let validator = jsonschema::validator_for(&schema.schema_document)
        .map_err(|e| GatewayError::InvalidRequest(format!("schema does not compile: {e}")))?;
    let validator = Arc::new(validator);
    cache
        .lock()
        .expect("validator cache")
        .insert(key, validator.clone());
    Ok(validator)
}

/// Parses a reply, tolerating a Markdown code fence around the JSON.
fn parse_reply(raw: &str) -> Result<Value, String> {
    let trimmed = raw.trim();
    let body = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed);
    serde_json::from_str(body).map_err(|e| format!("response is not valid JSON ({e})"))
}

/// Schema check; returns one line per violation.
pub fn schema_violations(schema: &SchemaSpec, document: &Value) -> Result<Vec<String>, GatewayError> {
    let validator = validator_for(schema)?;
    Ok(validator
        .iter_errors(document)
        .map(|e| {
            let path = e.instance_path().to_string();
            let at = if path.is_empty() { "/".to_string() } else { path };
            format!("at {at}: {e}")
        })
        .collect())
}

/// Text of the user message appended before a retry.
pub fn corrective_message(violations: &[String]) -> String {
    let mut text =
        String::from("Your previous response was rejected because it did not satisfy the required JSON schema:\n");
    for v in violations {
        text.push_str("- ");
        text.push_str(v);
        text.push('\n');
    }
    text.push_str("Respond again with a single JSON document that satisfies the schema exactly.");
    text
}

impl StructuredCompleter for Gateway {
    fn complete_structured(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        request.check()?;
        let mut current = request.clone();
        let mut violations = Vec::new();
        let mut last_document = None;
        for attempt in 1..=self.retry_limit {
            let raw = {
                let _permit = self.permits.acquire();
                self.backend.send(&current)?
            };
            violations = match parse_reply(&raw) {
                Ok(document) => {
                    let found = schema_violations(&request.schema, &document)?;
                    if found.is_empty() {
                        return Ok(Completion {
                            document,
                            attempts: attempt,
                        });
                    }
                    last_document = Some(document);
                    found
                }
                Err(parse_error) => vec![parse_error],
            };
            current.messages.push(Message::user(corrective_message(&violations)));
        }
        Err(GatewayError::SchemaViolation {
            stage: request.stage(),
            attempts: self.retry_limit,
            violations,
            last_document,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    Record,
    Replay,
    Mock,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(Mode::Live),
            "record" => Ok(Mode::Record),
            "replay" => Ok(Mode::Replay),
            "mock" => Ok(Mode::Mock),
            other => Err(format!("unknown mode `{other}` (live, record, replay, mock)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub mode: Mode,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub retry_limit: u32,
    pub request_timeout: Duration,
    pub cassette: Option<PathBuf>,
    pub max_concurrent: usize,
    pub mock_seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            mode: Mode::Mock,
            endpoint: None,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            retry_limit: DEFAULT_RETRY_LIMIT,
            request_timeout: Duration::from_secs(180),
            cassette: None,
            max_concurrent: DEFAULT_MAX_CONCURRENT,
            mock_seed: 0,
        }
    }
}

impl BackendConfig {
    fn live_backend(&self) -> Result<LiveBackend, GatewayError> {
        let endpoint = self
            .endpoint
            .clone()
            .ok_or_else(|| GatewayError::Config(format!("{:?} mode needs an endpoint", self.mode)))?;
        let key = std::env::var(&self.api_key_env).map_err(|_| {
            GatewayError::Config(format!(
                "{:?} mode needs an API key in ${}",
                self.mode, self.api_key_env
            ))
        })?;
        Ok(LiveBackend::new(endpoint, key, self.request_timeout))
    }

    fn cassette_path(&self) -> Result<PathBuf, GatewayError> {
        self.cassette
            .clone()
            .ok_or_else(|| GatewayError::Config(format!("{:?} mode needs a cassette path", self.mode)))
    }

    /// Builds the gateway this configuration describes.
    pub fn build(&self) -> Result<Gateway, GatewayError> {
        let backend: Box<dyn Backend> = match self.mode {
            Mode::Live => Box::new(self.live_backend()?),
            Mode::Record => Box::new(RecordingBackend::open(
                self.live_backend()?,
                self.cassette_path()?,
            )?),
            Mode::Replay => Box::new(ReplayBackend::open(&self.cassette_path()?)?),
            Mode::Mock => Box::new(SyntheticBackend::new(self.mock_seed)),
        };
        Ok(Gateway::from_boxed(backend)
            .with_retry_limit(self.retry_limit)
            .with_max_concurrent(self.max_concurrent))
    }
}
