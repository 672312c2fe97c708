//! Obtaining generation traces (tokens plus log-probabilities) from a model.

mod http;
mod scripted;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{GenerationTrace, TraceError};
use crate::transport::TransportError;

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{tokenize, PromptMatcher, ScriptEntry, ScriptResponse, ScriptedBackend, Segment};

/// Sampling parameters sent with every request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.8,
            max_new_tokens: 256,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must lie in (0,1], got {}", self.top_p));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("endpoint answered without per-token logprobs; enable logprobs on the server")]
    MissingLogprobs,
    #[error("concatenated token texts differ from the response content")]
    TokenTextMismatch,
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(#[from] TraceError),
    #[error("no scripted response matches prompt {fingerprint}")]
    NoScriptMatch { fingerprint: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Errors that make every metric of the run impossible; a run stops on them.
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::MissingLogprobs)
    }
}

impl From<TransportError> for BackendError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Unreachable(m) => BackendError::EndpointUnreachable(m),
            TransportError::Status { status, body } => BackendError::Http { status, body },
            TransportError::Decode(m) => BackendError::InvalidResponse(m),
        }
    }
}

/// A source of single-turn completions with per-token logprobs.
///
/// Implementations must be safe to call concurrently. Every call is independent:
/// no conversation state is carried between prompts.
pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;

    fn endpoint(&self) -> String;

    fn complete(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<GenerationTrace, BackendError>;
}

/// Stable hex digest of a prompt (SHA-256).
pub fn fingerprint(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}
