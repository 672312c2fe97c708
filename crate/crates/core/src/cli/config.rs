use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{Backend, HttpBackend, HttpBackendConfig, ScriptedBackend};
use crate::backend::GenerationParams;
use crate::ingestion::{SamplingPolicy, SchemaMap};
use crate::metrics::MetricWeights;
use crate::parsing::ClassifierRules;
use crate::pipeline::PromptTemplates;
use crate::similarity::{
    ConstantSimilarity, EmbeddingProvider, LexicalSimilarity, RemoteScorer, ScriptedSimilarity,
    SimilarityProvider,
};
use crate::transport::RetryPolicy;
use crate::uncertainty::DecisionConfidenceMode;

pub const DEFAULT_API_KEY_ENV: &str = "HAF_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config references undefined environment variable {0}")]
    UndefinedVariable(String),
    #[error("config: unterminated ${{...}} in {0:?}")]
    UnterminatedVariable(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    RetryPolicy::default().max_retries
}
fn default_scale() -> f64 {
    1.0
}
fn default_mock_model() -> String {
    "mock".to_string()
}

/// Where completions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// OpenAI-compatible chat completions server.
    Http {
        base_url: String,
        model_id: String,
        /// Literal key; usually written as `${SOME_VAR}`.
        #[serde(default)]
        api_key: Option<String>,
        /// Variable consulted when `api_key` is absent.
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
        /// Factor converting the server's logprobs to natural log.
        #[serde(default = "default_scale")]
        logprob_scale: f64,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_retries")]
        max_retries: u32,
    },
    /// Answers from a JSON script file.
    Scripted {
        #[serde(default = "default_mock_model")]
        model_id: String,
        script: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Lexical,
    Constant {
        value: f64,
        #[serde(default)]
        id: Option<String>,
    },
    Embedding {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key: Option<String>,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
    Scorer {
        url: String,
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        api_key: Option<String>,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
    /// Listed pair scores, other pairs delegated to `fallback`.
    Scripted {
        id: String,
        pairs: Vec<(String, String, f64)>,
        #[serde(default = "default_provider_box")]
        fallback: Box<ProviderConfig>,
    },
}

fn default_provider_box() -> Box<ProviderConfig> {
    Box::new(ProviderConfig::Lexical)
}

fn default_sampling() -> Option<SamplingPolicy> {
    Some(SamplingPolicy::default())
}
fn default_concurrency() -> usize {
    8
}

/// Run configuration, read from JSON. String values may contain `${VAR}`,
/// replaced from the environment before parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub backend: BackendConfig,
    #[serde(default)]
    pub params: GenerationParams,
    #[serde(default = "ProviderConfig::lexical")]
    pub similarity: ProviderConfig,
    /// Second provider for `compare-sim`.
    #[serde(default)]
    pub compare_similarity: Option<ProviderConfig>,
    #[serde(default)]
    pub weights: MetricWeights,
    /// Classifier rules file; the bundled rules when absent.
    #[serde(default)]
    pub rules: Option<PathBuf>,
    pub schema: SchemaMap,
    /// `null` keeps every loaded row in file order.
    #[serde(default = "default_sampling")]
    pub sampling: Option<SamplingPolicy>,
    #[serde(default)]
    pub templates: PromptTemplates,
    #[serde(default)]
    pub decision_mode: DecisionConfidenceMode,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl ProviderConfig {
    fn lexical() -> Self {
        ProviderConfig::Lexical
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match self {
            ProviderConfig::Constant { value, .. } if !(0.0..=1.0).contains(value) => Err(
                ConfigError::Invalid(format!("constant similarity {value} outside [0,1]")),
            ),
            ProviderConfig::Scripted { pairs, fallback, .. } => {
                if let Some((a, b, s)) = pairs.iter().find(|(_, _, s)| !(0.0..=1.0).contains(s)) {
                    return Err(ConfigError::Invalid(format!(
                        "scripted similarity ({a:?}, {b:?}) = {s} outside [0,1]"
                    )));
                }
                fallback.validate()
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Arc<dyn SimilarityProvider> {
        let retry = RetryPolicy::default();
        match self {
            ProviderConfig::Lexical => Arc::new(LexicalSimilarity),
            ProviderConfig::Constant { value, id } => Arc::new(ConstantSimilarity::new(
                id.clone().unwrap_or_else(|| format!("constant:{value}")),
                *value,
            )),
            ProviderConfig::Embedding {
                base_url,
                model,
                api_key,
                api_key_env,
                timeout_secs,
            } => Arc::new(EmbeddingProvider::new(
                base_url,
                model.clone(),
                resolve_key(api_key, api_key_env),
                Duration::from_secs(*timeout_secs),
                retry,
                8,
            )),
            ProviderConfig::Scorer {
                url,
                id,
                api_key,
                api_key_env,
                timeout_secs,
            } => {
                let s = RemoteScorer::new(
                    url.clone(),
                    resolve_key(api_key, api_key_env),
                    Duration::from_secs(*timeout_secs),
                    retry,
                    8,
                );
                Arc::new(match id {
                    Some(id) => s.with_id(id.clone()),
                    None => s,
                })
            }
            ProviderConfig::Scripted { id, pairs, fallback } => {
                let mut s = ScriptedSimilarity::new(id.clone(), fallback.build());
                for (a, b, v) in pairs {
                    s = s.with_pair(a.clone(), b.clone(), *v);
                }
                Arc::new(s)
            }
        }
    }
}

fn resolve_key(literal: &Option<String>, env: &str) -> Option<String> {
    literal
        .clone()
        .or_else(|| std::env::var(env).ok())
        .filter(|k| !k.is_empty())
}

/// Replaces every `${NAME}` in `s` using `lookup`.
pub fn interpolate_str(
    s: &str,
    lookup: &dyn Fn(&str) -> Option<String>,
) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find("${") {
        out.push_str(&rest[..i]);
        let tail = &rest[i + 2..];
        let end = tail
            .find('}')
            .ok_or_else(|| ConfigError::UnterminatedVariable(s.to_string()))?;
        let name = &tail[..end];
        out.push_str(&lookup(name).ok_or_else(|| ConfigError::UndefinedVariable(name.into()))?);
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Interpolates every string value (not keys) of a JSON document.
pub fn interpolate(
    v: &mut Value,
    lookup: &dyn Fn(&str) -> Option<String>,
) -> Result<(), ConfigError> {
    match v {
        Value::String(s) => *s = interpolate_str(s, lookup)?,
        Value::Array(items) => {
            for item in items {
                interpolate(item, lookup)?;
            }
        }
        Value::Object(map) => {
            for item in map.values_mut() {
                interpolate(item, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl Config {
    /// Parses, interpolates from the process environment, resolves relative
    /// paths against the config file's directory, and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&raw, base, &|name| std::env::var(name).ok())
    }

    pub fn from_json(
        raw: &str,
        base_dir: &Path,
        lookup: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let mut v: Value = serde_json::from_str(raw)?;
        interpolate(&mut v, lookup)?;
        let mut c: Config = serde_json::from_value(v)?;
        if let BackendConfig::Scripted { script, .. } = &mut c.backend {
            *script = base_dir.join(&*script);
        }
        if let Some(r) = &mut c.rules {
            *r = base_dir.join(&*r);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.weights.validate().map_err(|e| invalid(e.to_string()))?;
        self.params.validate().map_err(invalid)?;
        self.templates.validate().map_err(|e| invalid(e.to_string()))?;
        self.schema.validate().map_err(|e| invalid(e.to_string()))?;
        if let Some(p) = &self.sampling {
            p.validate().map_err(|e| invalid(e.to_string()))?;
        }
        if self.concurrency == 0 {
            return Err(invalid("concurrency must be at least 1".into()));
        }
        if let BackendConfig::Http {
            base_url,
            model_id,
            logprob_scale,
            ..
        } = &self.backend
        {
            if base_url.is_empty() || model_id.is_empty() {
                return Err(invalid("backend base_url and model_id are required".into()));
            }
            if !(*logprob_scale > 0.0 && logprob_scale.is_finite()) {
                return Err(invalid(format!("logprob_scale must be positive, got {logprob_scale}")));
            }
        }
        self.similarity.validate()?;
        if let Some(p) = &self.compare_similarity {
            p.validate()?;
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        match &self.backend {
            BackendConfig::Http { base_url, .. } => base_url.clone(),
            BackendConfig::Scripted { script, .. } => format!("script:{}", script.display()),
        }
    }

    pub fn build_backend(&self) -> Result<Arc<dyn Backend>, ConfigError> {
        Ok(match &self.backend {
            BackendConfig::Http {
                base_url,
                model_id,
                api_key,
                api_key_env,
                logprob_scale,
                timeout_secs,
                max_retries,
            } => {
                let mut hc = HttpBackendConfig::new(base_url.clone(), model_id.clone());
                hc.api_key = resolve_key(api_key, api_key_env);
                hc.logprob_scale = *logprob_scale;
                hc.max_in_flight = self.concurrency;
                hc.timeout = Duration::from_secs(*timeout_secs);
                hc.retry.max_retries = *max_retries;
                Arc::new(HttpBackend::new(hc).map_err(|e| ConfigError::Invalid(e.to_string()))?)
            }
            BackendConfig::Scripted { model_id, script } => Arc::new(
                ScriptedBackend::from_file(model_id.clone(), script)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        })
    }

    pub fn load_rules(&self) -> Result<ClassifierRules, ConfigError> {
        match &self.rules {
            Some(p) => ClassifierRules::load(p).map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(ClassifierRules::default()),
        }
    }
}
