use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{ClientError, Gate, RetryPolicy};

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 2048;
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
    /// Lookup key for replay clients (usually a sample id).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl ModelRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: 0.0,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            stop: Vec::new(),
            key: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_stop(mut self, stop: impl Into<String>) -> Self {
        self.stop.push(stop.into());
        self
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }

    pub fn digest(&self) -> String {
        prompt_digest(&self.prompt)
    }
}

/// Hex SHA-256 of a prompt.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub trait ModelClient: Send + Sync {
    fn complete(&self, req: &ModelRequest) -> Result<String, ClientError>;
}

impl<T: ModelClient + ?Sized> ModelClient for &T {
    fn complete(&self, req: &ModelRequest) -> Result<String, ClientError> {
        (**self).complete(req)
    }
}

impl<T: ModelClient + ?Sized> ModelClient for Arc<T> {
    fn complete(&self, req: &ModelRequest) -> Result<String, ClientError> {
        (**self).complete(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedExchange {
    pub request: ModelRequest,
    pub response: Result<String, String>,
}

/// Shared, append-only record of model exchanges.
#[derive(Debug, Clone, Default)]
pub struct RequestLog {
    inner: Arc<Mutex<Vec<LoggedExchange>>>,
}

impl RequestLog {
    pub fn push(&self, request: &ModelRequest, response: &Result<String, ClientError>) {
        let entry = LoggedExchange {
            request: request.clone(),
            response: response.clone().map_err(|e| e.to_string()),
        };
        self.inner
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(entry);
    }

    pub fn entries(&self) -> Vec<LoggedExchange> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn requests(&self) -> Vec<ModelRequest> {
        self.entries().into_iter().map(|e| e.request).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Connection settings for a chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEndpoint {
    /// Full URL of the chat-completions route.
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer credential. When the variable
    /// is unset no `Authorization` header is sent.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_concurrency: usize,
}

impl ChatEndpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout_secs: 120,
            max_concurrency: 4,
        }
    }
}

/// Chat-completion client speaking the `messages` / `choices` schema.
///
/// Request body: `{"model", "messages": [{"role": "user", "content"}],
/// "temperature", "max_tokens", "stop"}`. The completion text is read from
/// `choices[0].message.content`.
pub struct HttpModelClient {
    endpoint: ChatEndpoint,
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
    gate: Gate,
    log: RequestLog,
}

impl HttpModelClient {
    pub fn new(endpoint: ChatEndpoint) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| ClientError::ModelUnavailable(e.to_string()))?;
        Ok(Self {
            gate: Gate::new(endpoint.max_concurrency),
            endpoint,
            http,
            retry: RetryPolicy::default(),
            log: RequestLog::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn log(&self) -> &RequestLog {
        &self.log
    }

    fn body(&self, req: &ModelRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.endpoint.model,
            "messages": [{ "role": "user", "content": req.prompt }],
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
        });
        if !req.stop.is_empty() {
            body["stop"] = json!(req.stop);
        }
        body
    }

    fn send(&self, req: &ModelRequest) -> Result<String, ClientError> {
        let body = self.body(req);
        let key = std::env::var(&self.endpoint.api_key_env).ok();
        let _permit = self.gate.acquire();
        self.retry
            .run(|| {
                let mut call = self.http.post(&self.endpoint.url).json(&body);
                if let Some(key) = &key {
                    call = call.bearer_auth(key);
                }
                let resp = call.send().map_err(|e| (true, e.to_string()))?;
                let status = resp.status();
                let text = resp.text().map_err(|e| (true, e.to_string()))?;
                if !status.is_success() {
                    let retryable = status.is_server_error() || status.as_u16() == 429;
                    return Err((retryable, format!("HTTP {status}: {text}")));
                }
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| (false, format!("invalid response body: {e}")))?;
                value["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| (false, "response has no choices[0].message.content".into()))
            })
            .map_err(|(_, msg)| ClientError::ModelUnavailable(msg))
    }
}

impl ModelClient for HttpModelClient {
    fn complete(&self, req: &ModelRequest) -> Result<String, ClientError> {
        let out = self.send(req);
        self.log.push(req, &out);
        out
    }
}

/// One line of a replay file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub key: String,
    pub completion: String,
}

/// Returns canned completions keyed by request key or prompt digest.
#[derive(Debug, Clone, Default)]
pub struct ReplayModelClient {
    entries: HashMap<String, String>,
}

impl ReplayModelClient {
    pub fn new(entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.key, e.completion)).collect(),
        }
    }

    /// Reads a line-record file of `{"key", "completion"}` objects.
    pub fn from_file(path: &Path) -> Result<Self, ClientError> {
        let file = File::open(path)
            .map_err(|e| ClientError::Replay(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| ClientError::Replay(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(&line)
                .map_err(|e| ClientError::Replay(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, key: &str) -> Result<&str, ClientError> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ClientError::ReplayMiss(key.to_string()))
    }
}

impl ModelClient for ReplayModelClient {
    fn complete(&self, req: &ModelRequest) -> Result<String, ClientError> {
        if let Some(key) = &req.key {
            if let Some(hit) = self.entries.get(key) {
                return Ok(hit.clone());
            }
        }
        let digest = req.digest();
        self.entries
            .get(&digest)
            .cloned()
            .ok_or_else(|| ClientError::ReplayMiss(req.key.clone().unwrap_or(digest)))
    }
}

/// Pops completions from a fixed queue, recording every request.
#[derive(Debug, Default)]
pub struct ScriptedModelClient {
    queue: Mutex<VecDeque<String>>,
    log: RequestLog,
}

impl ScriptedModelClient {
    pub fn new<I, S>(completions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            queue: Mutex::new(completions.into_iter().map(Into::into).collect()),
            log: RequestLog::default(),
        }
    }

    pub fn log(&self) -> &RequestLog {
        &self.log
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl ModelClient for ScriptedModelClient {
    fn complete(&self, req: &ModelRequest) -> Result<String, ClientError> {
        let next = self
            .queue
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .pop_front();
        let out = next.ok_or_else(|| ClientError::ReplayMiss("script exhausted".into()));
        self.log.push(req, &out);
        out
    }
}

/// Adapts a closure into a model client; handy for fixtures whose answer
/// depends on the prompt.
pub struct FnModelClient<F> {
    f: F,
    log: RequestLog,
}

impl<F> FnModelClient<F>
where
    F: Fn(&ModelRequest) -> Result<String, ClientError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self {
            f,
            log: RequestLog::default(),
        }
    }

    pub fn log(&self) -> &RequestLog {
        &self.log
    }
}

impl<F> ModelClient for FnModelClient<F>
where
    F: Fn(&ModelRequest) -> Result<String, ClientError> + Send + Sync,
{
    fn complete(&self, req: &ModelRequest) -> Result<String, ClientError> {
        let out = (self.f)(req);
        self.log.push(req, &out);
        out
    }
}
