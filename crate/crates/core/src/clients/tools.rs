use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{ClientError, Gate, RetryPolicy};
use crate::registry::{random_image_stem, ArgKind, Registry};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRequest {
    pub tool: String,
    pub arguments: Vec<String>,
}

impl ToolRequest {
    pub fn new(tool: impl Into<String>, arguments: Vec<String>) -> Result<Self, ClientError> {
        if arguments.is_empty() {
            return Err(ClientError::InvalidRequest("empty argument list".into()));
        }
        Ok(Self {
            tool: tool.into(),
            arguments,
        })
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.tool.as_bytes());
        for a in &self.arguments {
            h.update([0u8]);
            h.update(a.as_bytes());
        }
        h.finalize().into()
    }
}

pub trait ToolHost: Send + Sync {
    fn invoke(&self, req: &ToolRequest) -> Result<String, ClientError>;
}

impl<T: ToolHost + ?Sized> ToolHost for &T {
    fn invoke(&self, req: &ToolRequest) -> Result<String, ClientError> {
        (**self).invoke(req)
    }
}

impl<T: ToolHost + ?Sized> ToolHost for Arc<T> {
    fn invoke(&self, req: &ToolRequest) -> Result<String, ClientError> {
        (**self).invoke(req)
    }
}

/// `Image Super-Resolution` -> `image-super-resolution`
pub fn tool_slug(name: &str) -> String {
    let mut slug = String::with_capacity(name.len());
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            slug.push(c.to_ascii_lowercase());
        } else if !slug.ends_with('-') && !slug.is_empty() {
            slug.push('-');
        }
    }
    while slug.ends_with('-') {
        slug.pop();
    }
    slug
}

/// Tool host reached over HTTP.
///
/// Each tool is served at `POST {base}/tools/{slug}` with the JSON body
/// `{"tool": <name>, "arguments": [..]}`; a 2xx response body is the
/// observation text.
pub struct HttpToolHost {
    base: String,
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
    gate: Gate,
}

impl HttpToolHost {
    pub fn new(base: impl Into<String>, max_concurrency: usize) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| ClientError::ToolHostUnavailable(e.to_string()))?;
        Ok(Self {
            base: base.into().trim_end_matches('/').to_string(),
            http,
            retry: RetryPolicy::default(),
            gate: Gate::new(max_concurrency),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn route(&self, tool: &str) -> String {
        format!("{}/tools/{}", self.base, tool_slug(tool))
    }
}

enum HostFailure {
    Transport(String),
    Status(u16, String),
}

impl ToolHost for HttpToolHost {
    fn invoke(&self, req: &ToolRequest) -> Result<String, ClientError> {
        let url = self.route(&req.tool);
        let body = json!({ "tool": req.tool, "arguments": req.arguments });
        let _permit = self.gate.acquire();
        let mut failure = None;
        let out = self.retry.run(|| {
            let resp = self.http.post(&url).json(&body).send().map_err(|e| {
                failure = Some(HostFailure::Transport(e.to_string()));
                (true, e.to_string())
            })?;
            let status = resp.status();
            let text = resp.text().map_err(|e| {
                failure = Some(HostFailure::Transport(e.to_string()));
                (true, e.to_string())
            })?;
            if status.is_success() {
                Ok(text)
            } else {
                failure = Some(HostFailure::Status(status.as_u16(), text.clone()));
                Err((false, text))
            }
        });
        out.map_err(|_| match failure {
            Some(HostFailure::Status(status, body)) => ClientError::ToolFailure {
                tool: req.tool.clone(),
                status,
                body,
            },
            Some(HostFailure::Transport(msg)) => ClientError::ToolHostUnavailable(msg),
            None => ClientError::ToolHostUnavailable(url.clone()),
        })
    }
}

#[derive(Debug, Clone)]
struct MockTool {
    output: ArgKind,
    slug: String,
    template: Option<String>,
}

/// Deterministic tool host.
///
/// Image-producing tools answer `outputs/<8 letters>_<tool-slug>.png`, the
/// letters seeded by a digest of the request; text tools answer their canned
/// `mock_response` with `{0}`, `{1}`, ... replaced by the arguments.
#[derive(Debug, Clone, Default)]
pub struct MockToolHost {
    tools: HashMap<String, MockTool>,
    calls: Arc<Mutex<Vec<ToolRequest>>>,
}

impl MockToolHost {
    pub fn from_registry(r: &Registry) -> Self {
        let tools = r
            .tools()
            .iter()
            .map(|t| {
                (
                    t.name.clone(),
                    MockTool {
                        output: t.output,
                        slug: tool_slug(&t.name),
                        template: t.mock_response.clone(),
                    },
                )
            })
            .collect();
        Self {
            tools,
            calls: Arc::default(),
        }
    }

    /// Every request received so far, in order.
    pub fn calls(&self) -> Vec<ToolRequest> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn text_output(tool: &str, template: Option<&str>, args: &[String]) -> String {
        match template {
            Some(t) => {
                let mut out = t.to_string();
                for (i, a) in args.iter().enumerate() {
                    out = out.replace(&format!("{{{i}}}"), a);
                }
                out
            }
            None => format!("{tool} output for {}", args.join(", ")),
        }
    }
}

impl ToolHost for MockToolHost {
    fn invoke(&self, req: &ToolRequest) -> Result<String, ClientError> {
        self.calls
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(req.clone());
        let tool = self
            .tools
            .get(&req.tool)
            .ok_or_else(|| ClientError::ToolFailure {
                tool: req.tool.clone(),
                status: 404,
                body: format!("no such tool: {}", req.tool),
            })?;
        Ok(match tool.output {
            ArgKind::ImagePath => {
                let mut rng = ChaCha8Rng::from_seed(req.digest());
                format!("outputs/{}_{}.png", random_image_stem(&mut rng), tool.slug)
            }
            ArgKind::Text => Self::text_output(&req.tool, tool.template.as_deref(), &req.arguments),
        })
    }
}
