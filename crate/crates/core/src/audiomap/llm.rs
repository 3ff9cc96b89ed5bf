use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MappingResult, MappingSource, PromptBundle, VideoLabelSpace};
use crate::error::{Error, Result};

/// Chat-completion endpoint settings. The API key is read from the
/// environment variable named by `api_key_env`, never from the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "AVTTA_LLM_API_KEY".into(),
            timeout_secs: 30.0,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(Error::config("llm.endpoint", "must be an http(s) URL"));
        }
        if self.model.trim().is_empty() {
            return Err(Error::config("llm.model", "must not be empty"));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::config("llm.timeout_secs", "must be positive"));
        }
        Ok(())
    }
}

/// Anything that turns a rendered prompt into reply text.
pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Blocking JSON-over-HTTP chat-completion client.
pub struct HttpChatClient {
    config: LlmConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: String,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fail(String),
}

impl HttpChatClient {
    pub fn new(config: LlmConfig) -> Result<Self> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Llm(format!("cannot build http client: {e}")))?;
        Ok(Self { config, api_key, http })
    }

    fn attempt(&self, prompt: &str) -> Attempt {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage { role: "user", content: prompt }],
            temperature: 0.0,
        };
        let mut req = self.http.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport: {e}")),
        };
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(format!("status {status}"));
        }
        if !status.is_success() {
            return Attempt::Fail(format!("status {status}"));
        }
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        match serde_json::from_str::<ChatResponse>(&text) {
            Ok(r) => match r.choices.into_iter().next() {
                Some(c) => Attempt::Done(c.message.content),
                None => Attempt::Fail("malformed reply: no choices".into()),
            },
            Err(e) => Attempt::Fail(format!("malformed reply: {e}")),
        }
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16));
                log::debug!("llm retry {attempt} after {wait} ms: {last}");
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(prompt) {
                Attempt::Done(s) => return Ok(s),
                Attempt::Fail(e) => return Err(Error::Llm(e)),
                Attempt::Retry(e) => last = e,
            }
        }
        Err(Error::Llm(format!("gave up after {} attempts: {last}", self.config.max_retries + 1)))
    }
}

type ReplyFn = dyn Fn(&str) -> Result<String> + Send + Sync;

/// In-process client for tests and offline runs.
pub struct FixtureClient {
    reply: Box<ReplyFn>,
    calls: AtomicUsize,
}

impl FixtureClient {
    pub fn new(reply: impl Fn(&str) -> Result<String> + Send + Sync + 'static) -> Self {
        Self { reply: Box::new(reply), calls: AtomicUsize::new(0) }
    }

    pub fn constant(reply: impl Into<String>) -> Self {
        let reply = reply.into();
        Self::new(move |_| Ok(reply.clone()))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatClient for FixtureClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.reply)(prompt)
    }
}

/// Sends the rendered prompt once and resolves the trimmed reply. Failures
/// of any kind give `valid = false`.
pub fn map_via_llm(client: &dyn ChatClient, prompt: &PromptBundle, space: &VideoLabelSpace) -> MappingResult {
    match client.complete(&prompt.render()) {
        Ok(reply) => MappingResult::resolved(reply.trim().to_string(), space, MappingSource::Llm),
        Err(e) => MappingResult::invalid(String::new(), MappingSource::Llm, e.to_string()),
    }
}

/// Hex SHA-256 of the rendered prompt.
pub fn prompt_hash(prompt: &PromptBundle) -> String {
    hex::encode(Sha256::digest(prompt.render().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub sample_id: String,
    pub prompt_hash: String,
    pub raw_reply: String,
    pub resolved_label: Option<String>,
}

/// Append-only JSONL record of LLM replies. Later lines override earlier
/// ones for the same sample.
#[derive(Debug, Default)]
pub struct MappingCache {
    path: Option<PathBuf>,
    entries: HashMap<String, CacheEntry>,
}

impl MappingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists; appends go to the same file.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                entries.insert(entry.sample_id.clone(), entry);
            }
        }
        Ok(Self { path: Some(path.to_path_buf()), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry for `sample_id` whose prompt hash matches.
    pub fn lookup(&self, sample_id: &str, prompt_hash: &str) -> Option<&CacheEntry> {
        self.entries.get(sample_id).filter(|e| e.prompt_hash == prompt_hash)
    }

    pub fn append(&mut self, entry: CacheEntry) -> Result<()> {
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            f.write_all(&line).map_err(|e| Error::io(path, e))?;
        }
        self.entries.insert(entry.sample_id.clone(), entry);
        Ok(())
    }
}
