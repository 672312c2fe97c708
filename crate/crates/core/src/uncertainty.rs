//! Relevance-weighted predictive entropy of a generated span and the
//! confidence `C = exp(-U)` derived from it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GenerationTrace, ParsedExplanation, TextSpan, TokenRecord};
use crate::similarity::{token_relevance, RelevanceVector, Similarity, SimilarityError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("{tokens} tokens but {weights} relevance weights")]
    LengthMismatch { tokens: usize, weights: usize },
    #[error("decision has no sentences")]
    EmptyDecision,
    #[error("span is not aligned to tokens")]
    UnalignedSpan,
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

/// Uncertainty `U >= 0` of a span and its confidence `C = exp(-U)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub uncertainty: f64,
    pub confidence: f64,
}

impl UncertaintyScore {
    pub fn from_uncertainty(u: f64) -> Self {
        Self {
            uncertainty: u,
            confidence: (-u).exp(),
        }
    }
}

/// How a multi-sentence decision is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionConfidenceMode {
    /// Mean of per-sentence confidences.
    #[default]
    SentenceMean,
    /// The whole decision scored as one span.
    Concatenated,
}

/// `U = sum_i (-log p_i) * relevance_i`.
pub fn span_uncertainty(
    tokens: &[TokenRecord],
    relevance: &RelevanceVector,
) -> Result<UncertaintyScore, UncertaintyError> {
    if tokens.len() != relevance.normalized.len() {
        return Err(UncertaintyError::LengthMismatch {
            tokens: tokens.len(),
            weights: relevance.normalized.len(),
        });
    }
    let u: f64 = tokens
        .iter()
        .zip(&relevance.normalized)
        .map(|(t, w)| t.surprisal() * w)
        .sum();
    // Surprisals are >= 0 and weights are >= 0, so only rounding can go negative.
    Ok(UncertaintyScore::from_uncertainty(u.max(0.0)))
}

/// Arithmetic mean of per-sentence confidences.
pub fn decision_confidence(
    sentences: &[(&[TokenRecord], &RelevanceVector)],
) -> Result<f64, UncertaintyError> {
    if sentences.is_empty() {
        return Err(UncertaintyError::EmptyDecision);
    }
    let mut total = 0.0;
    for (tokens, relevance) in sentences {
        total += span_uncertainty(tokens, relevance)?.confidence;
    }
    Ok(total / sentences.len() as f64)
}

/// Token relevance of an aligned span, computed from its token texts.
pub fn span_relevance(
    trace: &GenerationTrace,
    span: &TextSpan,
    sim: &Similarity,
) -> Result<RelevanceVector, UncertaintyError> {
    let range = span.tokens.ok_or(UncertaintyError::UnalignedSpan)?;
    let tokens = trace.tokens_in(&range);
    let texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
    let span_text = texts.concat();
    Ok(token_relevance(sim, &span_text, &texts)?)
}

/// Scores one aligned span of a trace.
pub fn span_score(
    trace: &GenerationTrace,
    span: &TextSpan,
    sim: &Similarity,
) -> Result<UncertaintyScore, UncertaintyError> {
    let relevance = span_relevance(trace, span, sim)?;
    let range = span.tokens.ok_or(UncertaintyError::UnalignedSpan)?;
    span_uncertainty(trace.tokens_in(&range), &relevance)
}

/// Confidence of every reason of a parse, in order.
pub fn reason_confidences(
    trace: &GenerationTrace,
    parsed: &ParsedExplanation,
    sim: &Similarity,
) -> Result<Vec<f64>, UncertaintyError> {
    parsed
        .reason_spans
        .iter()
        .map(|s| span_score(trace, s, sim).map(|u| u.confidence))
        .collect()
}

/// Confidence of the decision of a parse; `None` when there is no decision text.
pub fn parsed_decision_confidence(
    trace: &GenerationTrace,
    parsed: &ParsedExplanation,
    sim: &Similarity,
    mode: DecisionConfidenceMode,
) -> Result<Option<f64>, UncertaintyError> {
    let Some(decision) = parsed.decision_span else {
        return Ok(None);
    };
    match mode {
        DecisionConfidenceMode::Concatenated => {
            Ok(Some(span_score(trace, &decision, sim)?.confidence))
        }
        DecisionConfidenceMode::SentenceMean => {
            if parsed.decision_sentences.is_empty() {
                return Ok(Some(span_score(trace, &decision, sim)?.confidence));
            }
            let mut rel = Vec::with_capacity(parsed.decision_sentences.len());
            for s in &parsed.decision_sentences {
                let range = s.tokens.ok_or(UncertaintyError::UnalignedSpan)?;
                rel.push((trace.tokens_in(&range), span_relevance(trace, s, sim)?));
            }
            let refs: Vec<(&[TokenRecord], &RelevanceVector)> =
                rel.iter().map(|(t, r)| (*t, r)).collect();
            decision_confidence(&refs).map(Some)
        }
    }
}
