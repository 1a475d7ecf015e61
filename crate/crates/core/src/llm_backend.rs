//! Language-model access: a live OpenAI-compatible client, a scripted mock,
//! and a record/replay layer keyed by a hash of the canonical request.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical::to_canonical_line;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest { model: model.into(), messages, temperature: 0.0, max_tokens: 2048, seed: Some(0) }
    }

    /// All message contents joined by newlines.
    pub fn transcript(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub latency_ms: u64,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse { text: text.into(), usage: Usage::default(), latency_ms: 0 }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no recorded response for request {hash}")]
    RecordingMiss { hash: String },
    #[error("mock script exhausted")]
    ScriptExhausted,
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

// ---------------------------------------------------------------------------
// Request hashing
// ---------------------------------------------------------------------------

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// SHA-256 over the canonical form of a request: message roles and
/// whitespace-normalized contents, temperature and max_tokens. The model id
/// is left out so recordings can be replayed under any model name.
pub fn request_hash(request: &ChatRequest) -> String {
    let messages: Vec<Json> = request
        .messages
        .iter()
        .map(|m| json!({"role": m.role, "content": normalize_ws(&m.content)}))
        .collect();
    let canonical = json!({
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    let line = to_canonical_line(&canonical).expect("request serializes");
    hex::encode(Sha256::digest(line.as_bytes()))
}

// ---------------------------------------------------------------------------
// Mock
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
struct RuleDoc {
    #[serde(rename = "match", default)]
    needles: Vec<String>,
    responses: Vec<Json>,
    #[serde(default)]
    repeat: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct ScriptDoc {
    #[serde(default)]
    rules: Vec<RuleDoc>,
    #[serde(default)]
    queue: Vec<Json>,
}

#[derive(Debug)]
struct Rule {
    needles: Vec<String>,
    responses: Vec<String>,
    repeat: bool,
    used: usize,
}

#[derive(Debug, Default)]
struct MockState {
    rules: Vec<Rule>,
    queue: VecDeque<String>,
}

/// Scripted backend. Rules fire when every one of their substrings occurs
/// in the request's messages and hand out their responses in order (the
/// last one forever when `repeat` is set). Requests no rule takes are served
/// from the queue.
#[derive(Debug, Default)]
pub struct MockBackend {
    state: Mutex<MockState>,
}

fn response_text(v: Json) -> String {
    match v {
        Json::String(s) => s,
        other => other.to_string(),
    }
}

impl MockBackend {
    pub fn from_queue<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let queue = responses.into_iter().map(Into::into).collect();
        MockBackend { state: Mutex::new(MockState { rules: Vec::new(), queue }) }
    }

    /// Parses a script document: `{"rules": [{"match": [..], "responses": [..], "repeat": bool}], "queue": [..]}`.
    /// Responses may be strings or JSON values (sent as compact JSON text).
    pub fn from_script(text: &str) -> Result<Self, BackendError> {
        let doc: ScriptDoc =
            serde_json::from_str(text).map_err(|e| BackendError::Config(format!("mock script: {e}")))?;
        let rules = doc
            .rules
            .into_iter()
            .map(|r| Rule {
                needles: r.needles,
                responses: r.responses.into_iter().map(response_text).collect(),
                repeat: r.repeat,
                used: 0,
            })
            .collect();
        let queue = doc.queue.into_iter().map(response_text).collect();
        Ok(MockBackend { state: Mutex::new(MockState { rules, queue }) })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| BackendError::Io { path: path.to_path_buf(), source })?;
        Self::from_script(&text)
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let haystack = request.transcript();
        let mut st = self.state.lock().unwrap();
        for rule in st.rules.iter_mut() {
            let live = rule.used < rule.responses.len() || (rule.repeat && !rule.responses.is_empty());
            if live && rule.needles.iter().all(|n| haystack.contains(n.as_str())) {
                let i = rule.used.min(rule.responses.len() - 1);
                rule.used += 1;
                return Ok(ChatResponse::text(rule.responses[i].clone()));
            }
        }
        st.queue.pop_front().map(ChatResponse::text).ok_or(BackendError::ScriptExhausted)
    }
}

// ---------------------------------------------------------------------------
// Record / replay
// ---------------------------------------------------------------------------

/// One line of a recording file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub hash: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// An append-only recording file, shareable between several
/// [`RecordingBackend`]s.
pub struct Recorder {
    out: Mutex<BufWriter<File>>,
    path: PathBuf,
}

impl Recorder {
    pub fn create(path: &Path) -> Result<Arc<Self>, BackendError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| BackendError::Io { path: dir.to_path_buf(), source })?;
        }
        let file = File::create(path).map_err(|source| BackendError::Io { path: path.to_path_buf(), source })?;
        Ok(Arc::new(Recorder { out: Mutex::new(BufWriter::new(file)), path: path.to_path_buf() }))
    }

    fn append(&self, entry: &RecordEntry) -> Result<(), BackendError> {
        let line = to_canonical_line(entry).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let mut out = self.out.lock().unwrap();
        let io = |source| BackendError::Io { path: self.path.clone(), source };
        out.write_all(line.as_bytes()).map_err(io)?;
        out.write_all(b"\n").map_err(io)?;
        out.flush().map_err(io)
    }
}

/// Wraps a backend and appends every exchange to a JSON Lines recording.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    recorder: Arc<Recorder>,
}

impl RecordingBackend {
    pub fn create(inner: Arc<dyn Backend>, path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(inner, Recorder::create(path)?))
    }

    pub fn new(inner: Arc<dyn Backend>, recorder: Arc<Recorder>) -> Self {
        RecordingBackend { inner, recorder }
    }
}

impl Backend for RecordingBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.inner.complete(request)?;
        let entry = RecordEntry { hash: request_hash(request), request: request.clone(), response: response.clone() };
        self.recorder.append(&entry)?;
        Ok(response)
    }
}

#[derive(Debug)]
struct Slot {
    responses: Vec<ChatResponse>,
    next: usize,
}

/// Serves responses from a recording. Entries are keyed by the hash of their
/// recorded request, recomputed on load; identical requests get their
/// recorded responses in order, then the last one again.
#[derive(Debug)]
pub struct ReplayBackend {
    slots: Mutex<BTreeMap<String, Slot>>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let file = File::open(path).map_err(|source| BackendError::Io { path: path.to_path_buf(), source })?;
        let mut slots: BTreeMap<String, Slot> = BTreeMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| BackendError::Io { path: path.to_path_buf(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: RecordEntry = serde_json::from_str(&line)
                .map_err(|e| BackendError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
            slots
                .entry(request_hash(&entry.request))
                .or_insert_with(|| Slot { responses: Vec::new(), next: 0 })
                .responses
                .push(entry.response);
        }
        Ok(ReplayBackend { slots: Mutex::new(slots) })
    }

    pub fn len(&self) -> usize {
        self.slots.lock().unwrap().values().map(|s| s.responses.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let hash = request_hash(request);
        let mut slots = self.slots.lock().unwrap();
        let slot = slots.get_mut(&hash).ok_or(BackendError::RecordingMiss { hash })?;
        let i = slot.next.min(slot.responses.len() - 1);
        slot.next += 1;
        Ok(slot.responses[i].clone())
    }
}

// ---------------------------------------------------------------------------
// Live
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl LiveConfig {
    /// Reads `BESIM_API_BASE`, `BESIM_API_KEY` and `BESIM_MODEL`.
    pub fn from_env() -> Result<Self, BackendError> {
        let base_url = std::env::var("BESIM_API_BASE")
            .map_err(|_| BackendError::Config("BESIM_API_BASE is not set".into()))?;
        let model =
            std::env::var("BESIM_MODEL").map_err(|_| BackendError::Config("BESIM_MODEL is not set".into()))?;
        Ok(LiveConfig { api_key: std::env::var("BESIM_API_KEY").ok(), ..LiveConfig::new(base_url, model) })
    }

    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        LiveConfig {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            max_in_flight: 4,
            max_retries: 4,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// OpenAI-compatible chat-completions client.
pub struct LiveBackend {
    config: LiveConfig,
    agent: ureq::Agent,
    gate: Gate,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = Gate { free: Mutex::new(config.max_in_flight.max(1)), cv: Condvar::new() };
        LiveBackend { config, agent, gate }
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn body(&self, request: &ChatRequest) -> String {
        let model = if request.model.is_empty() { &self.config.model } else { &request.model };
        let mut body = json!({
            "model": model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body.to_string()
    }

    fn attempt(&self, body: &str) -> Result<(u16, String), ureq::Error> {
        let mut req = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string()?;
        Ok((status, text))
    }
}

fn parse_completion(text: &str) -> Result<(String, Usage), BackendError> {
    let v: Json = serde_json::from_str(text).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Json::as_str)
        .ok_or_else(|| BackendError::InvalidResponse("missing choices[0].message.content".into()))?;
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Json::as_u64).unwrap_or(0),
        completion_tokens: v.pointer("/usage/completion_tokens").and_then(Json::as_u64).unwrap_or(0),
    };
    Ok((content.to_string(), usage))
}

impl Backend for LiveBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = self.body(request);
        let _permit = self.gate.acquire();
        let start = Instant::now();
        let mut backoff = self.config.initial_backoff;
        let mut tries = 0;
        loop {
            let result = self.attempt(&body);
            let retryable = match &result {
                Ok((status, _)) => *status == 429 || *status >= 500,
                Err(_) => true,
            };
            if retryable && tries < self.config.max_retries {
                tries += 1;
                std::thread::sleep(backoff);
                backoff *= 2;
                continue;
            }
            return match result {
                Ok((200..=299, text)) => {
                    let (text, usage) = parse_completion(&text)?;
                    Ok(ChatResponse { text, usage, latency_ms: start.elapsed().as_millis() as u64 })
                }
                Ok((status, body)) => Err(BackendError::Http { status, body }),
                Err(e) => Err(BackendError::Transport(e.to_string())),
            };
        }
    }
}
