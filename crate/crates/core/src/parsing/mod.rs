//! Splits a model response into a decision and reasons, classifies the decision,
//! and maps character spans onto the generating tokens.

mod rules;

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

pub use rules::{ClassifierRules, RulesError, RulesFile, StanceRule, SufficiencyRule};

use crate::backend::fingerprint;
use crate::model::{
    DecisionKind, GenerationTrace, ParsedExplanation, Stance, StageKind, TextSpan, TokenRange,
};
use crate::similarity::{Similarity, SimilarityError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("alignment impossible: {0}")]
    AlignmentImpossible(String),
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

static ITEM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^[ \t]*(?:\*\*|__)?\d{1,3}[.)](?:\*\*|__)?(?:[ \t]+|$)").unwrap()
});

static DECISION_HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^[ \t#>]*(?:\*\*|__)?[ \t]*(?:final[ \t]+)?decision[ \t]*(?:\*\*|__)?[ \t]*:[ \t]*(?:\*\*|__)?[ \t]*",
    )
    .unwrap()
});

static REASON_HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^[ \t#>]*(?:\*\*|__)?[ \t]*(?:(?:additional|specific|new|further|other)[ \t]+)?reasons?(?:[ \t]*\(s\))?(?:[ \t]+for[ \t]+[^:\n]{0,40})?[ \t]*(?:\*\*|__)?[ \t]*:[ \t]*(?:\*\*|__)?[ \t]*",
    )
    .unwrap()
});

static SENTENCE_END: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"[.!?]+["'”’)\]*_]*(?:\s+|$)|\n"#).unwrap());

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Decision,
    /// Saw a header-only reason line, waiting for its body.
    AfterHeader,
    /// Inside an unnumbered reason paragraph.
    Single,
    SingleDone,
    Items { attached: bool, after_blank: bool },
}

fn trim_range(text: &str, start: usize, end: usize) -> Option<(usize, usize)> {
    let s = &text[start..end];
    let lead = s.len() - s.trim_start().len();
    let trail = s.len() - s.trim_end().len();
    let (a, b) = (start + lead, end - trail);
    (a < b).then_some((a, b))
}

/// Byte ranges of the sentences in `text[start..end]`, split on terminal
/// punctuation and line breaks. Fragments without any alphanumeric character
/// are dropped.
pub fn split_sentences(text: &str, start: usize, end: usize) -> Vec<(usize, usize)> {
    let body = &text[start..end];
    let mut out = Vec::new();
    let mut from = 0;
    let push = |out: &mut Vec<(usize, usize)>, a: usize, b: usize| {
        if let Some((x, y)) = trim_range(text, start + a, start + b) {
            if text[x..y].chars().any(char::is_alphanumeric) {
                out.push((x, y));
            }
        }
    };
    for m in SENTENCE_END.find_iter(body) {
        push(&mut out, from, m.end());
        from = m.end();
    }
    if from < body.len() {
        push(&mut out, from, body.len());
    }
    out
}

/// Structural parse of a response: decision span, sentences and reasons.
///
/// The decision is the text before the first numbered item or reasons header.
/// Numbered items (`1.`, `2)`, `**3.**`) each become a reason, including lines
/// that directly continue them or indented lines after a blank line. When no
/// numbered list exists, the paragraph after a `Reason:` style header is taken
/// as a single reason. Stance and decision kind are left unclassified.
pub fn parse_explanation(raw: &str, _stage: StageKind) -> ParsedExplanation {
    let mut decision: Option<(usize, usize)> = None;
    let mut items: Vec<(usize, usize)> = Vec::new();
    let mut single: Option<(usize, usize)> = None;
    let mut phase = Phase::Decision;

    let mut offset = 0;
    for piece in raw.split_inclusive('\n') {
        let ls = offset;
        offset += piece.len();
        let line = piece.trim_end_matches(['\n', '\r']);
        let le = ls + line.len();
        let blank = line.trim().is_empty();

        if let Some(m) = ITEM.find(line) {
            items.push((ls + m.end(), le));
            phase = Phase::Items {
                attached: true,
                after_blank: false,
            };
            continue;
        }
        match phase {
            Phase::Decision => {
                if blank {
                    continue;
                }
                if let Some(m) = REASON_HEADER.find(line) {
                    if line[m.end()..].trim().is_empty() {
                        phase = Phase::AfterHeader;
                    } else {
                        single = Some((ls + m.end(), le));
                        phase = Phase::Single;
                    }
                    continue;
                }
                let start = match DECISION_HEADER.find(line) {
                    Some(m) if decision.is_none() => ls + m.end(),
                    _ => ls,
                };
                if line[start - ls..].trim().is_empty() {
                    continue;
                }
                decision = Some(match decision {
                    None => (start, le),
                    Some((s, _)) => (s, le),
                });
            }
            Phase::AfterHeader => {
                if !blank {
                    single = Some((ls, le));
                    phase = Phase::Single;
                }
            }
            Phase::Single => {
                if blank {
                    phase = Phase::SingleDone;
                } else if let Some(s) = single.as_mut() {
                    s.1 = le;
                }
            }
            Phase::SingleDone => {}
            Phase::Items {
                attached,
                after_blank,
            } => {
                if blank {
                    phase = Phase::Items {
                        attached,
                        after_blank: true,
                    };
                    continue;
                }
                let indented = line.starts_with([' ', '\t']);
                if attached && (!after_blank || indented) {
                    if let Some(last) = items.last_mut() {
                        last.1 = le;
                    }
                    phase = Phase::Items {
                        attached: true,
                        after_blank: false,
                    };
                } else {
                    phase = Phase::Items {
                        attached: false,
                        after_blank: false,
                    };
                }
            }
        }
    }

    let reasons: Vec<(usize, usize)> = if items.is_empty() {
        single.into_iter().collect()
    } else {
        items
    }
    .into_iter()
    .filter_map(|(a, b)| trim_range(raw, a, b))
    .collect();

    let decision = decision.and_then(|(a, b)| trim_range(raw, a, b));
    let decision_sentences = decision
        .map(|(a, b)| split_sentences(raw, a, b))
        .unwrap_or_default();

    ParsedExplanation {
        decision_span: decision.map(|(a, b)| TextSpan::new(a, b)),
        decision_text: decision.map(|(a, b)| raw[a..b].to_string()).unwrap_or_default(),
        decision_sentences: decision_sentences
            .into_iter()
            .map(|(a, b)| TextSpan::new(a, b))
            .collect(),
        reason_texts: reasons.iter().map(|&(a, b)| raw[a..b].to_string()).collect(),
        reason_spans: reasons.into_iter().map(|(a, b)| TextSpan::new(a, b)).collect(),
        stance: Stance::Unresolved,
        decision_kind: None,
        refusal: false,
        source_fingerprint: fingerprint(raw),
    }
}

/// Stance of a Justify decision; the first matching rule wins.
pub fn classify_stance(decision_text: &str, rules: &ClassifierRules) -> Stance {
    rules
        .stance
        .iter()
        .find(|(re, _)| re.is_match(decision_text))
        .map_or(Stance::Unresolved, |(_, s)| *s)
}

/// True when the response opens with a refusal and carries no reasons.
pub fn detect_refusal(raw: &str, rules: &ClassifierRules) -> bool {
    let parsed = parse_explanation(raw, StageKind::Justify);
    parsed.reason_count() == 0 && opens_with_refusal(raw, rules)
}

fn opens_with_refusal(text: &str, rules: &ClassifierRules) -> bool {
    let text = text.trim_start();
    rules.refusal.iter().any(|re| re.is_match(text))
}

fn sentence_texts(text: &str) -> Vec<&str> {
    split_sentences(text, 0, text.len())
        .into_iter()
        .map(|(a, b)| &text[a..b])
        .collect()
}

/// Sufficiency reading of an uphold-stage decision.
///
/// Keyword rules are tried sentence by sentence and the first sentence with a
/// match decides. Then refusals. Otherwise each anchor class is scored by the
/// mean similarity over sentence and anchor pairs, and the best class is taken
/// if it reaches the floor. Anything else is nonsensical.
pub fn classify_decision(
    decision_text: &str,
    _stage: StageKind,
    rules: &ClassifierRules,
    sim: &Similarity,
) -> Result<DecisionKind, SimilarityError> {
    let sentences = sentence_texts(decision_text);
    for s in &sentences {
        if let Some((_, kind)) = rules.sufficiency.iter().find(|(re, _)| re.is_match(s)) {
            return Ok(*kind);
        }
    }
    if opens_with_refusal(decision_text, rules) {
        return Ok(DecisionKind::Refusal);
    }
    if sentences.is_empty() {
        return Ok(DecisionKind::Nonsensical);
    }
    let mut best: Option<(DecisionKind, f64)> = None;
    for (kind, anchors) in rules.anchors() {
        if anchors.is_empty() {
            continue;
        }
        let pairs: Vec<(&str, &str)> = sentences
            .iter()
            .flat_map(|s| anchors.iter().map(move |a| (*s, a.as_str())))
            .collect();
        let scores = sim.score_batch(&pairs)?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        if best.is_none_or(|(_, m)| mean > m) {
            best = Some((*kind, mean));
        }
    }
    Ok(match best {
        Some((kind, m)) if m >= rules.similarity_floor() => kind,
        _ => DecisionKind::Nonsensical,
    })
}

fn align_one(
    offsets: &[std::ops::Range<usize>],
    span: &TextSpan,
) -> Result<TextSpan, AlignmentError> {
    let first = offsets
        .iter()
        .position(|r| r.end > span.char_start)
        .ok_or_else(|| AlignmentError::AlignmentImpossible("span starts past the last token".into()))?;
    let last = offsets
        .iter()
        .rposition(|r| r.start < span.char_end)
        .ok_or_else(|| AlignmentError::AlignmentImpossible("span ends before the first token".into()))?;
    if last < first {
        return Err(AlignmentError::AlignmentImpossible(
            "span covers no token".into(),
        ));
    }
    let (cs, ce) = (offsets[first].start, offsets[last].end);
    Ok(TextSpan {
        char_start: cs,
        char_end: ce,
        tokens: Some(TokenRange {
            start: first,
            end: last + 1,
            widened: cs != span.char_start || ce != span.char_end,
        }),
    })
}

/// Pulls each span's start past the previous span's last token so neighbours
/// never share a token.
fn separate(
    offsets: &[std::ops::Range<usize>],
    spans: &mut [&mut TextSpan],
) -> Result<(), AlignmentError> {
    for i in 1..spans.len() {
        let prev_end = spans[i - 1].tokens.map_or(0, |t| t.end);
        let cur = &mut spans[i];
        let Some(t) = cur.tokens.as_mut() else {
            continue;
        };
        if t.start < prev_end {
            if prev_end >= t.end {
                return Err(AlignmentError::AlignmentImpossible(
                    "adjacent spans share all of their tokens".into(),
                ));
            }
            t.start = prev_end;
            t.widened = true;
            cur.char_start = offsets[prev_end].start;
        }
    }
    Ok(())
}

/// Maps every span of `parsed` onto token ranges of `trace`, widening to token
/// boundaries where a token straddles a span edge.
pub fn align_spans(
    trace: &GenerationTrace,
    parsed: &ParsedExplanation,
) -> Result<ParsedExplanation, AlignmentError> {
    if fingerprint(&trace.full_text) != parsed.source_fingerprint {
        return Err(AlignmentError::AlignmentImpossible(
            "parse was made from a different text".into(),
        ));
    }
    let offsets = trace.token_offsets();
    let mut out = parsed.clone();
    if let Some(d) = out.decision_span.as_mut() {
        *d = align_one(&offsets, d)?;
    }
    for s in out.reason_spans.iter_mut().chain(out.decision_sentences.iter_mut()) {
        *s = align_one(&offsets, s)?;
    }
    {
        let mut ordered: Vec<&mut TextSpan> = out
            .decision_span
            .iter_mut()
            .chain(out.reason_spans.iter_mut())
            .collect();
        ordered.sort_by_key(|s| s.char_start);
        separate(&offsets, &mut ordered)?;
    }
    separate(&offsets, &mut out.decision_sentences.iter_mut().collect::<Vec<_>>())?;
    Ok(out)
}

/// Parses, aligns and classifies one stage output.
pub fn analyze(
    trace: &GenerationTrace,
    stage: StageKind,
    rules: &ClassifierRules,
    sim: &Similarity,
) -> Result<ParsedExplanation, ParseError> {
    let parsed = parse_explanation(&trace.full_text, stage);
    let mut out = align_spans(trace, &parsed)?;
    if stage.is_uphold() {
        let kind = if out.reason_count() == 0 && out.decision_span.is_none() {
            DecisionKind::Nonsensical
        } else {
            classify_decision(&out.decision_text, stage, rules, sim)?
        };
        out.refusal = kind == DecisionKind::Refusal && out.reason_count() == 0;
        out.decision_kind = Some(kind);
    } else {
        out.refusal = out.reason_count() == 0 && opens_with_refusal(&trace.full_text, rules);
        // A refusal takes no stance even when it mentions toxicity.
        out.stance = if out.refusal {
            Stance::Unresolved
        } else {
            classify_stance(&out.decision_text, rules)
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
