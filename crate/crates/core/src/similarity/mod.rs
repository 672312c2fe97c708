//! Semantic similarity `g(a, b)` in [0,1], diversity `h = 1 - g`, and the
//! token-level relevance scores built on them.

mod cache;
mod providers;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::TransportError;

pub use cache::{CacheKey, ScoreCache};
pub use providers::{
    ConstantSimilarity, EmbeddingProvider, LexicalSimilarity, RemoteScorer, ReplayProvider,
    ScriptedSimilarity,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("similarity provider unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("similarity requested for empty text")]
    EmptyText,
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("score for pair not found in cache (provider {provider})")]
    CacheMiss { provider: String },
    #[error("token texts do not concatenate to the span text")]
    SpanMismatch,
    #[error("pair set {0:?} is empty")]
    EmptyPairSet(String),
    #[error("cache file: {0}")]
    CacheIo(String),
}

impl From<TransportError> for SimilarityError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Decode(m) => SimilarityError::InvalidResponse(m),
            other => SimilarityError::ProviderUnreachable(other.to_string()),
        }
    }
}

/// A semantic similarity model.
///
/// Only the output range is contractual; `score(a, a) == 1` and symmetry are
/// not assumed, since cross-encoders satisfy neither exactly.
pub trait SimilarityProvider: Send + Sync {
    /// Stable name used in cache keys and run manifests.
    fn provider_id(&self) -> &str;

    /// Raw scores for ordered pairs, before clamping to [0,1].
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError>;
}

/// Clamped, cached access to a [`SimilarityProvider`].
#[derive(Clone)]
pub struct Similarity {
    provider: Arc<dyn SimilarityProvider>,
    cache: Option<Arc<ScoreCache>>,
}

impl std::fmt::Debug for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Similarity")
            .field("provider", &self.provider.provider_id())
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

fn clamp_unit(v: f64) -> Result<f64, SimilarityError> {
    if v.is_nan() {
        return Err(SimilarityError::InvalidResponse("NaN similarity".into()));
    }
    Ok(v.clamp(0.0, 1.0))
}

impl Similarity {
    pub fn new(provider: Arc<dyn SimilarityProvider>) -> Self {
        Self {
            provider,
            cache: None,
        }
    }

    pub fn with_cache(provider: Arc<dyn SimilarityProvider>, cache: Arc<ScoreCache>) -> Self {
        Self {
            provider,
            cache: Some(cache),
        }
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    pub fn cache(&self) -> Option<&Arc<ScoreCache>> {
        self.cache.as_ref()
    }

    /// `g(a, b)` clamped into [0,1].
    pub fn score(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        Ok(self.score_batch(&[(a, b)])?[0])
    }

    /// `h(a, b) = 1 - g(a, b)`.
    pub fn diversity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        Ok(1.0 - self.score(a, b)?)
    }

    /// Scores many pairs, sending only uncached, distinct pairs to the provider.
    pub fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        if pairs.iter().any(|(a, b)| a.is_empty() || b.is_empty()) {
            return Err(SimilarityError::EmptyText);
        }
        let id = self.provider.provider_id();
        let mut out: Vec<Option<f64>> = vec![None; pairs.len()];
        let mut pending: Vec<(&str, &str)> = Vec::new();
        let mut slot_of: HashMap<(&str, &str), usize> = HashMap::new();
        let mut waiting: Vec<(usize, usize)> = Vec::new();
        for (i, &(a, b)) in pairs.iter().enumerate() {
            if let Some(v) = self.cache.as_ref().and_then(|c| c.get_symmetric(id, a, b)) {
                out[i] = Some(v);
                continue;
            }
            let slot = *slot_of.entry((a, b)).or_insert_with(|| {
                pending.push((a, b));
                pending.len() - 1
            });
            waiting.push((i, slot));
        }
        if !pending.is_empty() {
            let raw = self.provider.score_pairs(&pending)?;
            if raw.len() != pending.len() {
                return Err(SimilarityError::InvalidResponse(format!(
                    "expected {} scores, got {}",
                    pending.len(),
                    raw.len()
                )));
            }
            let mut scored = Vec::with_capacity(raw.len());
            for (&(a, b), v) in pending.iter().zip(raw) {
                let v = clamp_unit(v)?;
                if let Some(c) = &self.cache {
                    c.insert(id, a, b, v)?;
                }
                scored.push(v);
            }
            for (i, slot) in waiting {
                out[i] = Some(scored[slot]);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("every pair scored")).collect())
    }
}

/// Per-token semantic relevance of a span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceVector {
    /// `1 - |g(span, span without token i)|` per token.
    pub raw: Vec<f64>,
    /// `raw / sum(raw)`, or uniform when that sum is zero.
    pub normalized: Vec<f64>,
    #[serde(default)]
    pub uniform_fallback: bool,
}

impl RelevanceVector {
    pub fn uniform(n: usize) -> Self {
        Self {
            raw: vec![0.0; n],
            normalized: vec![1.0 / n as f64; n],
            uniform_fallback: true,
        }
    }

    /// Normalizes raw relevance scores, falling back to uniform weights on a zero sum.
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let n = raw.len();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            let normalized = raw.iter().map(|r| r / total).collect();
            Self {
                raw,
                normalized,
                uniform_fallback: false,
            }
        } else {
            Self {
                raw,
                normalized: vec![1.0 / n as f64; n],
                uniform_fallback: true,
            }
        }
    }
}

/// Leave-one-token-out relevance of every token of a span.
///
/// A single-token span has relevance `[1]`. Removing a token that leaves only
/// whitespace scores that removal as similarity 0.
pub fn token_relevance(
    sim: &Similarity,
    span_text: &str,
    token_texts: &[&str],
) -> Result<RelevanceVector, SimilarityError> {
    if token_texts.concat() != span_text || token_texts.is_empty() {
        return Err(SimilarityError::SpanMismatch);
    }
    if token_texts.len() == 1 {
        return Ok(RelevanceVector {
            raw: vec![1.0],
            normalized: vec![1.0],
            uniform_fallback: false,
        });
    }
    let reduced: Vec<String> = (0..token_texts.len())
        .map(|skip| {
            token_texts
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, t)| *t)
                .collect()
        })
        .collect();
    let queries: Vec<(&str, &str)> = reduced
        .iter()
        .filter(|r| !r.trim().is_empty())
        .map(|r| (span_text, r.as_str()))
        .collect();
    let mut scores = sim.score_batch(&queries)?.into_iter();
    let raw = reduced
        .iter()
        .map(|r| {
            let g = if r.trim().is_empty() {
                0.0
            } else {
                scores.next().expect("one score per query")
            };
            1.0 - g.abs()
        })
        .collect();
    Ok(RelevanceVector::from_raw(raw))
}

/// A labeled group of string pairs scored by two providers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub label: String,
    pub pairs: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderDiff {
    pub label: String,
    pub pairs: usize,
    pub mean_abs_diff: f64,
}

/// Mean absolute difference between two providers' scores, per pair set.
pub fn compare_providers(
    a: &Similarity,
    b: &Similarity,
    sets: &[PairSet],
) -> Result<Vec<ProviderDiff>, SimilarityError> {
    sets.iter()
        .map(|set| {
            if set.pairs.is_empty() {
                return Err(SimilarityError::EmptyPairSet(set.label.clone()));
            }
            let pairs: Vec<(&str, &str)> = set
                .pairs
                .iter()
                .map(|(x, y)| (x.as_str(), y.as_str()))
                .collect();
            let sa = a.score_batch(&pairs)?;
            let sb = b.score_batch(&pairs)?;
            let total: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
            Ok(ProviderDiff {
                label: set.label.clone(),
                pairs: pairs.len(),
                mean_abs_diff: total / pairs.len() as f64,
            })
        })
        .collect()
}
