use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{fingerprint, Backend, BackendError, GenerationParams};
use crate::model::{GenerationTrace, TokenRecord};

/// How a script entry selects the prompts it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMatcher {
    Prompt(String),
    Fingerprint(String),
    /// Substring match; tried only after exact and fingerprint matchers.
    Contains(String),
}

/// Segment of a scripted response sharing one logprob per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptResponse {
    /// Exact tokens with their logprobs.
    Tokens(Vec<(String, f64)>),
    /// Text split with [`tokenize`], each piece given the segment's logprob.
    Segments(Vec<Segment>),
    /// Content returned without logprobs, as a misconfigured server would.
    NoLogprobs(String),
}

/// One scripted prompt/response pair (the mock backend's file format).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: PromptMatcher,
    pub response: ScriptResponse,
}

impl ScriptEntry {
    pub fn tokens(prompt: impl Into<String>, tokens: &[(&str, f64)]) -> Self {
        Self {
            matcher: PromptMatcher::Prompt(prompt.into()),
            response: ScriptResponse::Tokens(
                tokens.iter().map(|(t, l)| (t.to_string(), *l)).collect(),
            ),
        }
    }

    pub fn text(matcher: PromptMatcher, text: impl Into<String>, logprob: f64) -> Self {
        Self {
            matcher,
            response: ScriptResponse::Segments(vec![Segment {
                text: text.into(),
                logprob,
            }]),
        }
    }

    fn validate(&self) -> Result<(), BackendError> {
        let bad = match &self.response {
            ScriptResponse::Tokens(t) => t.iter().any(|(_, l)| l.is_nan() || *l > 0.0),
            ScriptResponse::Segments(s) => s.iter().any(|s| s.logprob.is_nan() || s.logprob > 0.0),
            ScriptResponse::NoLogprobs(_) => false,
        };
        if bad {
            return Err(BackendError::Config(
                "scripted logprobs must be <= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Splits text into word-like pieces, each carrying its leading whitespace.
/// Concatenating the pieces reproduces the input exactly.
pub fn tokenize(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\s*(?:\w+|[^\w\s])|\s+").unwrap());
    re.find_iter(text).map(|m| m.as_str().to_string()).collect()
}

/// Deterministic backend answering from a fixed script.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    model_id: String,
    entries: Vec<ScriptEntry>,
    log: Arc<Mutex<Vec<String>>>,
}

impl ScriptedBackend {
    pub fn new(model_id: impl Into<String>, entries: Vec<ScriptEntry>) -> Result<Self, BackendError> {
        for e in &entries {
            e.validate()?;
        }
        Ok(Self {
            model_id: model_id.into(),
            entries,
            log: Arc::default(),
        })
    }

    /// Every prompt received so far, shared between clones.
    pub fn requests(&self) -> Vec<String> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Loads a JSON array of [`ScriptEntry`].
    pub fn from_file(model_id: impl Into<String>, path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::new(model_id, entries)
    }

    fn lookup(&self, prompt: &str, fp: &str) -> Option<&ScriptEntry> {
        self.entries
            .iter()
            .find(|e| match &e.matcher {
                PromptMatcher::Prompt(p) => p == prompt,
                PromptMatcher::Fingerprint(f) => f == fp,
                PromptMatcher::Contains(_) => false,
            })
            .or_else(|| {
                self.entries.iter().find(
                    |e| matches!(&e.matcher, PromptMatcher::Contains(s) if prompt.contains(s.as_str())),
                )
            })
    }
}

impl Backend for ScriptedBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn endpoint(&self) -> String {
        "scripted".into()
    }

    fn complete(
        &self,
        prompt: &str,
        _params: &GenerationParams,
    ) -> Result<GenerationTrace, BackendError> {
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(prompt.to_string());
        let fp = fingerprint(prompt);
        let entry = self
            .lookup(prompt, &fp)
            .ok_or_else(|| BackendError::NoScriptMatch {
                fingerprint: fp.clone(),
            })?;
        let tokens = match &entry.response {
            ScriptResponse::Tokens(t) => t
                .iter()
                .map(|(text, lp)| TokenRecord::new(text.clone(), *lp))
                .collect(),
            ScriptResponse::Segments(segments) => segments
                .iter()
                .flat_map(|s| {
                    tokenize(&s.text)
                        .into_iter()
                        .map(move |t| TokenRecord::new(t, s.logprob))
                })
                .collect(),
            ScriptResponse::NoLogprobs(_) => return Err(BackendError::MissingLogprobs),
        };
        Ok(GenerationTrace::new(tokens, fp)?)
    }
}
