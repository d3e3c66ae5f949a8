//! Chat-completion client for OpenAI-compatible endpoints.
//!
//! One contract covers live HTTP providers and the in-process scripted
//! provider: a [`ChatProvider`] executes a single [`CompletionRequest`] and
//! either returns a reply or a [`ProviderFault`]. [`ChatClient`] layers the
//! retry policy and the shared rate limiter on top and is what the rest of
//! the pipeline talks to.
//!
//! Assistant prefill is expressed on the wire as a final assistant-role
//! message that the endpoint must continue rather than answer. Whether a
//! given model/provider combination actually honors that is decided by the
//! probe battery in [`probe`], not by configuration guesses.

pub mod http;
pub mod probe;
pub mod rate;
pub mod retry;

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use rate::RateLimiter;
pub use retry::{execute_with_retry, RetryError, RetryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Decoding configuration. Greedy decoding is represented as temperature 0
/// with top_p 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl SamplingParams {
    pub fn greedy() -> Self {
        Self { temperature: 0.0, top_p: 1.0, max_tokens: None }
    }

    pub fn nucleus(temperature: f64, top_p: f64) -> Self {
        Self { temperature, top_p, max_tokens: None }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = Some(max_tokens);
        self
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(format!("temperature must be non-negative, got {}", self.temperature));
        }
        if !self.top_p.is_finite() || self.top_p <= 0.0 || self.top_p > 1.0 {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_tokens == Some(0) {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }
}

/// Where requests go and how they authenticate. Credentials are referenced
/// by environment variable name; the value is read at request time and never
/// stored or logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// Request-rate ceiling, requests per second.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<u32>,
}

/// A single chat-completion call. When `prefill` is set the final message
/// has the assistant role and the provider must continue it; the caller
/// forms the full utterance by concatenating prefix and continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub sampling: SamplingParams,
    pub prefill: bool,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>, sampling: SamplingParams) -> Self {
        Self { model: model.into(), messages, sampling, prefill: false }
    }

    pub fn prefill(model: impl Into<String>, messages: Vec<ChatMessage>, sampling: SamplingParams) -> Self {
        Self { model: model.into(), messages, sampling, prefill: true }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.sampling.validate()?;
        if self.model.trim().is_empty() {
            return Err("model id is empty".into());
        }
        if self.messages.is_empty() {
            return Err("request has no messages".into());
        }
        for (i, message) in self.messages.iter().enumerate() {
            if message.role != Role::System && message.content.is_empty() {
                return Err(format!("message {i} ({}) has empty content", message.role));
            }
        }
        if self.prefill {
            let last = self.messages.last().expect("non-empty");
            if last.role != Role::Assistant {
                return Err("prefill request must end with an assistant message".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

/// What a provider hands back for one successful request.
#[derive(Debug, Clone)]
pub struct ProviderReply {
    pub text: String,
    pub finish_reason: FinishReason,
    /// Generated token count by the provider's own accounting, when reported.
    pub tokens: Option<u32>,
}

/// One failed provider request. Rate-limit (429) and 5xx responses are
/// retryable, other statuses are not; transport-level failures are treated
/// as transient.
#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderFault {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider returned status {code}: {message}")]
    Status { code: u16, message: String },
}

impl ProviderFault {
    pub fn status_code(&self) -> Option<u16> {
        match self {
            ProviderFault::Status { code, .. } => Some(*code),
            ProviderFault::Transport(_) => None,
        }
    }
}

/// The one contract every provider implements; live HTTP and scripted
/// providers are interchangeable behind it.
pub trait ChatProvider: Send + Sync {
    fn execute(&self, request: &CompletionRequest) -> Result<ProviderReply, ProviderFault>;
}

/// Completed request with retry accounting.
#[derive(Debug, Clone)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    /// Total requests issued, including the successful one. Always >= 1.
    pub attempts: u32,
    pub latency: Duration,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum ClientError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider rejected the request with status {code}: {message}")]
    ProviderRejected { code: u16, message: String },
    #[error("no response after {attempts} attempts: {last}")]
    AbsentResponse { attempts: u32, last: String },
}

impl ClientError {
    pub fn is_absent(&self) -> bool {
        matches!(self, ClientError::AbsentResponse { .. })
    }
}

/// Provider plus retry policy plus (optional) shared rate limiter.
///
/// Safe for concurrent use: each in-flight request is independent and the
/// rate limiter is the only shared synchronized state.
#[derive(Clone)]
pub struct ChatClient {
    provider: Arc<dyn ChatProvider>,
    policy: RetryPolicy,
    limiter: Option<Arc<RateLimiter>>,
}

impl ChatClient {
    pub fn new(provider: Arc<dyn ChatProvider>, policy: RetryPolicy) -> Self {
        Self { provider, policy, limiter: None }
    }

    pub fn with_rate_limit(mut self, requests_per_second: u32) -> Self {
        self.limiter = Some(Arc::new(RateLimiter::new(requests_per_second)));
        self
    }

    pub fn policy(&self) -> &RetryPolicy {
        &self.policy
    }

    /// Issue one chat completion, retrying retryable faults per policy.
    ///
    /// Non-retryable provider statuses surface immediately as
    /// [`ClientError::ProviderRejected`]; an exhausted retry budget becomes
    /// [`ClientError::AbsentResponse`] rather than an escaping error.
    pub fn complete_chat(&self, request: &CompletionRequest) -> Result<CompletionResult, ClientError> {
        request.validate().map_err(ClientError::InvalidRequest)?;
        let started = Instant::now();
        let outcome = retry::execute_with_retry(&self.policy, |_attempt| {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            self.provider.execute(request)
        });
        match outcome {
            Ok((reply, attempts)) => Ok(CompletionResult {
                text: reply.text,
                finish_reason: reply.finish_reason,
                attempts,
                latency: started.elapsed(),
            }),
            Err(RetryError::NonRetryable(ProviderFault::Status { code, message })) => {
                Err(ClientError::ProviderRejected { code, message })
            }
            Err(RetryError::NonRetryable(fault)) => Err(ClientError::AbsentResponse {
                attempts: 1,
                last: fault.to_string(),
            }),
            Err(RetryError::Exhausted { attempts, last }) => Err(ClientError::AbsentResponse {
                attempts,
                last: last.to_string(),
            }),
        }
    }
}
