//! Model clients and tool hosts.
//!
//! Both come in a network flavour (chat-completion HTTP endpoint, HTTP tool
//! host) and deterministic in-process flavours used for replayed benchmarks
//! and tests.

mod gate;
mod model;
mod tools;

use std::time::Duration;

use thiserror::Error;

pub use gate::Gate;
pub use model::{
    prompt_digest, ChatEndpoint, FnModelClient, HttpModelClient, LoggedExchange, ModelClient,
    ModelRequest, ReplayEntry, ReplayModelClient, RequestLog, ScriptedModelClient,
    DEFAULT_API_KEY_ENV, DEFAULT_MAX_NEW_TOKENS,
};
pub use tools::{tool_slug, HttpToolHost, MockToolHost, ToolHost, ToolRequest};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("model unavailable: {0}")]
    ModelUnavailable(String),
    #[error("no canned completion for {0:?}")]
    ReplayMiss(String),
    #[error("tool host unavailable: {0}")]
    ToolHostUnavailable(String),
    #[error("tool {tool:?} failed with status {status}: {body}")]
    ToolFailure {
        tool: String,
        status: u16,
        body: String,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay file: {0}")]
    Replay(String),
}

impl ClientError {
    /// Whether the failure comes from an unreachable upstream service.
    pub fn is_upstream(&self) -> bool {
        matches!(
            self,
            ClientError::ModelUnavailable(_) | ClientError::ToolHostUnavailable(_)
        )
    }
}

/// Exponential backoff schedule for transport failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            attempts: 1,
            ..Self::default()
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32
            .checked_shl(retry.saturating_sub(1))
            .unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Runs `op` until it succeeds, returns a non-retryable error, or the
    /// attempts are exhausted. `op` reports `Err((retryable, message))`.
    pub(crate) fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, (bool, String)>,
    ) -> Result<T, (bool, String)> {
        let attempts = self.attempts.max(1);
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err((true, msg)) if attempt < attempts => {
                    log::warn!("attempt {attempt}/{attempts} failed: {msg}");
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
