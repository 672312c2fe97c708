use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use super::{fingerprint, Backend, BackendError, GenerationParams};
use crate::model::{GenerationTrace, TokenRecord};
use crate::transport::{JsonClient, RetryPolicy};

/// Connection settings for an OpenAI-compatible chat completions server.
#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Server root; `/v1/chat/completions` is appended.
    pub base_url: String,
    pub model_id: String,
    pub api_key: Option<String>,
    /// Multiplier turning reported logprobs into natural-log units
    /// (1.0 for natural log, `ln 2` for base-2 servers).
    pub logprob_scale: f64,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key: None,
            logprob_scale: 1.0,
            max_in_flight: 8,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    url: String,
    client: JsonClient,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [Message<'a>; 1],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    logprobs: bool,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        if !(config.logprob_scale > 0.0 && config.logprob_scale.is_finite()) {
            return Err(BackendError::Config(format!(
                "logprob_scale must be positive, got {}",
                config.logprob_scale
            )));
        }
        let url = format!("{}/v1/chat/completions", config.base_url.trim_end_matches('/'));
        let client = JsonClient::new(
            config.api_key.clone(),
            config.timeout,
            config.retry,
            config.max_in_flight,
        );
        Ok(Self {
            config,
            url,
            client,
        })
    }
}

impl Backend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn endpoint(&self) -> String {
        self.url.clone()
    }

    fn complete(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<GenerationTrace, BackendError> {
        let body = ChatRequest {
            model: &self.config.model_id,
            messages: [Message {
                role: "user",
                content: prompt,
            }],
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_new_tokens,
            logprobs: true,
        };
        let reply = self.client.post(&self.url, &body)?;
        let (content, tokens) = decode_chat_response(&reply, self.config.logprob_scale)?;
        let trace = GenerationTrace::new(tokens, fingerprint(prompt))?;
        debug_assert_eq!(trace.full_text, content);
        Ok(trace)
    }
}

/// Extracts the message content and its token logprobs from a chat completion.
pub(crate) fn decode_chat_response(
    reply: &Value,
    scale: f64,
) -> Result<(String, Vec<TokenRecord>), BackendError> {
    let choice = reply
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::InvalidResponse("no choices".into()))?;
    let content = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::InvalidResponse("no message content".into()))?
        .to_string();
    let items = match choice.pointer("/logprobs/content").and_then(Value::as_array) {
        Some(items) if !items.is_empty() => items,
        _ => return Err(BackendError::MissingLogprobs),
    };

    let with_bytes = items.iter().all(|i| i.get("bytes").is_some_and(Value::is_array));
    let mut tokens = Vec::with_capacity(items.len());
    let mut pending: Vec<u8> = Vec::new();
    let mut pending_lp = 0.0;
    for item in items {
        let lp = item
            .get("logprob")
            .and_then(Value::as_f64)
            .ok_or(BackendError::MissingLogprobs)?;
        let lp = normalize_logprob(lp * scale)?;
        if with_bytes {
            // Byte-level tokens may split a UTF-8 sequence; merge until the
            // buffer decodes, summing logprobs of the merged pieces.
            for b in item["bytes"].as_array().into_iter().flatten() {
                let b = b
                    .as_u64()
                    .filter(|b| *b <= 255)
                    .ok_or_else(|| BackendError::InvalidResponse("bad token byte".into()))?;
                pending.push(b as u8);
            }
            pending_lp += lp;
            if let Ok(s) = std::str::from_utf8(&pending) {
                tokens.push(token(s.to_string(), pending_lp));
                pending.clear();
                pending_lp = 0.0;
            }
        } else {
            let text = item
                .get("token")
                .and_then(Value::as_str)
                .ok_or_else(|| BackendError::InvalidResponse("token without text".into()))?;
            tokens.push(token(text.to_string(), lp));
        }
    }
    if !pending.is_empty() {
        return Err(BackendError::InvalidResponse(
            "token bytes end inside a UTF-8 sequence".into(),
        ));
    }
    let joined: String = tokens.iter().map(|t| t.text.as_str()).collect();
    if joined != content {
        return Err(BackendError::TokenTextMismatch);
    }
    Ok((content, tokens))
}

fn token(text: String, logprob: f64) -> TokenRecord {
    let special = text.is_empty();
    TokenRecord {
        text,
        logprob,
        special,
    }
}

fn normalize_logprob(lp: f64) -> Result<f64, BackendError> {
    if lp.is_nan() {
        return Err(BackendError::InvalidResponse("NaN logprob".into()));
    }
    if lp > 1e-6 {
        return Err(BackendError::InvalidResponse(format!("positive logprob {lp}")));
    }
    Ok(lp.min(0.0))
}
