use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::{SimilarityError, SimilarityProvider};
use crate::transport::{JsonClient, RetryPolicy};

/// Texts per embeddings request.
const EMBED_BATCH: usize = 128;

/// Cosine similarity of embeddings from an OpenAI-compatible `/v1/embeddings` endpoint.
pub struct EmbeddingProvider {
    id: String,
    url: String,
    model: String,
    client: JsonClient,
}

impl EmbeddingProvider {
    pub fn new(
        base_url: &str,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Self {
        let model = model.into();
        Self {
            id: format!("embedding:{model}"),
            url: format!("{}/v1/embeddings", base_url.trim_end_matches('/')),
            model,
            client: JsonClient::new(api_key, timeout, retry, max_in_flight),
        }
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, SimilarityError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EMBED_BATCH) {
            let reply = self
                .client
                .post(&self.url, &json!({"model": self.model, "input": chunk}))?;
            let data = reply
                .get("data")
                .and_then(Value::as_array)
                .ok_or_else(|| SimilarityError::InvalidResponse("no data array".into()))?;
            if data.len() != chunk.len() {
                return Err(SimilarityError::InvalidResponse(format!(
                    "asked for {} embeddings, got {}",
                    chunk.len(),
                    data.len()
                )));
            }
            let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
            for (pos, item) in data.iter().enumerate() {
                let index = item
                    .get("index")
                    .and_then(Value::as_u64)
                    .map_or(pos, |i| i as usize);
                let vector = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| SimilarityError::InvalidResponse("no embedding".into()))?
                    .iter()
                    .map(|x| {
                        x.as_f64().ok_or_else(|| {
                            SimilarityError::InvalidResponse("non-numeric embedding".into())
                        })
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                rows.push((index, vector));
            }
            rows.sort_by_key(|(i, _)| *i);
            out.extend(rows.into_iter().map(|(_, v)| v));
        }
        Ok(out)
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl SimilarityProvider for EmbeddingProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut texts: Vec<&str> = Vec::new();
        for &(a, b) in pairs {
            for t in [a, b] {
                index.entry(t).or_insert_with(|| {
                    texts.push(t);
                    texts.len() - 1
                });
            }
        }
        let vectors = self.embed(&texts)?;
        Ok(pairs
            .iter()
            .map(|(a, b)| cosine(&vectors[index[a]], &vectors[index[b]]))
            .collect())
    }
}

/// Pair scorer behind `POST <url>` with `{pairs: [[a, b], ...]}` returning `{scores: [...]}`,
/// e.g. a cross-encoder service.
pub struct RemoteScorer {
    id: String,
    url: String,
    client: JsonClient,
}

impl RemoteScorer {
    pub fn new(
        url: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Self {
        let url = url.into();
        Self {
            id: format!("scorer:{url}"),
            url,
            client: JsonClient::new(api_key, timeout, retry, max_in_flight),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

impl SimilarityProvider for RemoteScorer {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        let body = json!({"pairs": pairs.iter().map(|(a, b)| [a, b]).collect::<Vec<_>>()});
        let reply = self.client.post(&self.url, &body)?;
        let scores = reply
            .get("scores")
            .and_then(Value::as_array)
            .ok_or_else(|| SimilarityError::InvalidResponse("no scores array".into()))?;
        scores
            .iter()
            .map(|s| {
                s.as_f64()
                    .ok_or_else(|| SimilarityError::InvalidResponse("non-numeric score".into()))
            })
            .collect()
    }
}

/// Offline bag-of-words cosine over lowercase alphanumeric words.
///
/// Crude as a semantic model, but deterministic and dependency-free; useful for
/// dry runs and tests.
#[derive(Debug, Clone, Default)]
pub struct LexicalSimilarity;

fn word_counts(s: &str) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for w in s
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        *m.entry(w.to_lowercase()).or_insert(0.0) += 1.0;
    }
    m
}

impl LexicalSimilarity {
    pub fn similarity(a: &str, b: &str) -> f64 {
        if a == b {
            return 1.0;
        }
        let (wa, wb) = (word_counts(a), word_counts(b));
        let dot: f64 = wa
            .iter()
            .filter_map(|(w, x)| wb.get(w).map(|y| x * y))
            .sum();
        let na = wa.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb = wb.values().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

impl SimilarityProvider for LexicalSimilarity {
    fn provider_id(&self) -> &str {
        "lexical"
    }

    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        Ok(pairs.iter().map(|(a, b)| Self::similarity(a, b)).collect())
    }
}

/// Returns the same score for every pair.
#[derive(Debug, Clone)]
pub struct ConstantSimilarity {
    id: String,
    value: f64,
}

impl ConstantSimilarity {
    pub fn new(id: impl Into<String>, value: f64) -> Self {
        Self {
            id: id.into(),
            value,
        }
    }
}

impl SimilarityProvider for ConstantSimilarity {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        Ok(vec![self.value; pairs.len()])
    }
}

/// Fixed scores for listed pairs (either order), delegating the rest.
pub struct ScriptedSimilarity {
    id: String,
    table: HashMap<(String, String), f64>,
    fallback: Arc<dyn SimilarityProvider>,
}

impl ScriptedSimilarity {
    pub fn new(id: impl Into<String>, fallback: Arc<dyn SimilarityProvider>) -> Self {
        Self {
            id: id.into(),
            table: HashMap::new(),
            fallback,
        }
    }

    pub fn with_pair(mut self, a: impl Into<String>, b: impl Into<String>, score: f64) -> Self {
        self.table.insert((a.into(), b.into()), score);
        self
    }
}

impl SimilarityProvider for ScriptedSimilarity {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        let mut out = vec![0.0; pairs.len()];
        let mut rest_idx = Vec::new();
        let mut rest = Vec::new();
        for (i, &(a, b)) in pairs.iter().enumerate() {
            let hit = self
                .table
                .get(&(a.to_string(), b.to_string()))
                .or_else(|| self.table.get(&(b.to_string(), a.to_string())));
            match hit {
                Some(v) => out[i] = *v,
                None => {
                    rest_idx.push(i);
                    rest.push((a, b));
                }
            }
        }
        if !rest.is_empty() {
            for (i, v) in rest_idx.into_iter().zip(self.fallback.score_pairs(&rest)?) {
                out[i] = v;
            }
        }
        Ok(out)
    }
}

/// Stand-in for a provider whose scores must all come from a cache.
///
/// Any request reaching it is a cache miss; it never touches the network.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    id: String,
}

impl ReplayProvider {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into() }
    }
}

impl SimilarityProvider for ReplayProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn score_pairs(&self, _pairs: &[(&str, &str)]) -> Result<Vec<f64>, SimilarityError> {
        Err(SimilarityError::CacheMiss {
            provider: self.id.clone(),
        })
    }
}
