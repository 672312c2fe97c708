//! Domain vocabulary shared by every stage of an evaluation run.
//!
//! Everything here is a plain value object: constructed once, then only read.
//! Serialization shapes double as the on-disk record format of a run directory.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ground-truth toxicity annotation carried by a dataset row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToxicityLabel {
    Toxic,
    NonToxic,
    Unknown,
}

/// One input text to be explained by the model under evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSample {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toxicity_label: Option<ToxicityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toxicity_prob: Option<f64>,
    pub source: String,
}

impl InputSample {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.is_empty() {
            return Err(ModelError::EmptySampleText(self.id.clone()));
        }
        if let Some(p) = self.toxicity_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(ModelError::ProbabilityOutOfRange(p));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sample {0} has empty text")]
    EmptySampleText(String),
    #[error("toxicity probability {0} outside [0,1]")]
    ProbabilityOutOfRange(f64),
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// A sampled token with the natural-log probability the model assigned to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub special: bool,
}

impl TokenRecord {
    pub fn new(text: impl Into<String>, logprob: f64) -> Self {
        Self {
            text: text.into(),
            logprob,
            special: false,
        }
    }

    /// Token entropy term `-log p`.
    pub fn surprisal(&self) -> f64 {
        -self.logprob
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("generation trace has no tokens")]
    Empty,
    #[error("token {index} has invalid logprob {value}")]
    InvalidLogprob { index: usize, value: f64 },
    #[error("token {index} has empty text but is not flagged special")]
    EmptyToken { index: usize },
    #[error("full_text does not equal the concatenated token texts")]
    TextMismatch,
}

/// The raw output of one completion: tokens in order plus their concatenation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub tokens: Vec<TokenRecord>,
    pub full_text: String,
    pub prompt_fingerprint: String,
}

impl GenerationTrace {
    /// Builds a trace whose `full_text` is the exact concatenation of `tokens`.
    pub fn new(
        tokens: Vec<TokenRecord>,
        prompt_fingerprint: impl Into<String>,
    ) -> Result<Self, TraceError> {
        let full_text = tokens.iter().map(|t| t.text.as_str()).collect::<String>();
        let trace = Self {
            tokens,
            full_text,
            prompt_fingerprint: prompt_fingerprint.into(),
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.tokens.is_empty() {
            return Err(TraceError::Empty);
        }
        for (index, t) in self.tokens.iter().enumerate() {
            if !t.logprob.is_finite() || t.logprob > 0.0 {
                return Err(TraceError::InvalidLogprob {
                    index,
                    value: t.logprob,
                });
            }
            if t.text.is_empty() && !t.special {
                return Err(TraceError::EmptyToken { index });
            }
        }
        let mut rebuilt = String::with_capacity(self.full_text.len());
        for t in &self.tokens {
            rebuilt.push_str(&t.text);
        }
        if rebuilt != self.full_text {
            return Err(TraceError::TextMismatch);
        }
        Ok(())
    }

    /// Byte range of every token inside `full_text`.
    pub fn token_offsets(&self) -> Vec<Range<usize>> {
        let mut pos = 0;
        self.tokens
            .iter()
            .map(|t| {
                let r = pos..pos + t.text.len();
                pos = r.end;
                r
            })
            .collect()
    }

    pub fn tokens_in(&self, range: &TokenRange) -> &[TokenRecord] {
        &self.tokens[range.start..range.end]
    }

    /// Sum of `-logprob` over all tokens.
    pub fn total_surprisal(&self) -> f64 {
        self.tokens.iter().map(TokenRecord::surprisal).sum()
    }
}

/// Half-open range of token indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRange {
    pub start: usize,
    pub end: usize,
    /// Set when the character span was widened to land on token boundaries.
    #[serde(default, skip_serializing_if = "is_false")]
    pub widened: bool,
}

impl TokenRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// A byte range of `full_text`, optionally aligned to the tokens producing it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    pub char_start: usize,
    pub char_end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<TokenRange>,
}

impl TextSpan {
    pub fn new(char_start: usize, char_end: usize) -> Self {
        Self {
            char_start,
            char_end,
            tokens: None,
        }
    }

    pub fn text<'a>(&self, full_text: &'a str) -> &'a str {
        &full_text[self.char_start..self.char_end]
    }

    pub fn len(&self) -> usize {
        self.char_end - self.char_start
    }

    pub fn is_empty(&self) -> bool {
        self.char_end <= self.char_start
    }
}

/// Toxicity stance read from a Justify decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    Toxic,
    MaybeToxic,
    NonToxic,
    Unresolved,
}

impl fmt::Display for Stance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stance::Toxic => "toxic",
            Stance::MaybeToxic => "maybe_toxic",
            Stance::NonToxic => "non_toxic",
            Stance::Unresolved => "unresolved",
        })
    }
}

/// What an uphold-stage decision says about the sufficiency of the given reasons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Sufficient,
    Insufficient,
    Doubtful,
    Nonsensical,
    Refusal,
}

impl fmt::Display for DecisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecisionKind::Sufficient => "sufficient",
            DecisionKind::Insufficient => "insufficient",
            DecisionKind::Doubtful => "doubtful",
            DecisionKind::Nonsensical => "nonsensical",
            DecisionKind::Refusal => "refusal",
        })
    }
}

/// A model response split into a decision and its numbered reasons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedExplanation {
    pub decision_span: Option<TextSpan>,
    /// Decision with any "Decision:" header removed.
    pub decision_text: String,
    pub decision_sentences: Vec<TextSpan>,
    pub reason_spans: Vec<TextSpan>,
    /// Reason bodies without their list markers, in order.
    pub reason_texts: Vec<String>,
    pub stance: Stance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_kind: Option<DecisionKind>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub refusal: bool,
    /// Fingerprint of the text the offsets refer to.
    pub source_fingerprint: String,
}

impl ParsedExplanation {
    pub fn reason_count(&self) -> usize {
        self.reason_spans.len()
    }

    /// All spans (decision first, then reasons) in document order.
    pub fn spans_in_order(&self) -> Vec<TextSpan> {
        let mut spans: Vec<TextSpan> = self
            .decision_span
            .iter()
            .copied()
            .chain(self.reason_spans.iter().copied())
            .collect();
        spans.sort_by_key(|s| s.char_start);
        spans
    }
}

/// Which prompt of the pipeline produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum StageKind {
    Justify,
    UpholdReasonInternal,
    UpholdReasonExternal,
    /// Hold-one-in probe of the Justify reason at this index.
    UpholdStanceSufficiency(usize),
    /// Leave-one-out probe omitting the Justify reason at this index.
    UpholdStanceNecessity(usize),
}

impl StageKind {
    pub fn is_uphold(&self) -> bool {
        !matches!(self, StageKind::Justify)
    }

    /// Name of the JSONL file under `stages/` holding records of this kind.
    pub fn file_stem(&self) -> &'static str {
        match self {
            StageKind::Justify => "justify",
            StageKind::UpholdReasonInternal => "uphold_internal",
            StageKind::UpholdReasonExternal => "uphold_external",
            StageKind::UpholdStanceSufficiency(_) => "uphold_suf",
            StageKind::UpholdStanceNecessity(_) => "uphold_nec",
        }
    }

    /// Total order used to lay out records of one sample deterministically.
    pub fn order_key(&self) -> (u8, usize) {
        match *self {
            StageKind::Justify => (0, 0),
            StageKind::UpholdReasonInternal => (1, 0),
            StageKind::UpholdReasonExternal => (2, 0),
            StageKind::UpholdStanceSufficiency(i) => (3, i),
            StageKind::UpholdStanceNecessity(i) => (4, i),
        }
    }

    pub fn reason_index(&self) -> Option<usize> {
        match *self {
            StageKind::UpholdStanceSufficiency(i) | StageKind::UpholdStanceNecessity(i) => Some(i),
            _ => None,
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reason_index() {
            Some(i) => write!(f, "{}[{}]", self.file_stem(), i),
            None => f.write_str(self.file_stem()),
        }
    }
}

/// One prompt/response unit with its parse and confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub sample_id: String,
    pub stage: StageKind,
    pub model_id: String,
    pub prompt_text: String,
    pub trace: GenerationTrace,
    pub parsed: ParsedExplanation,
    pub reason_confidences: Vec<f64>,
    /// Absent when the response carried no decision text.
    pub decision_confidence: Option<f64>,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

/// An invariant broken by a stage record.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ConfidenceOutOfRange { field: String, value: f64 },
    CountMismatch { reasons: usize, confidences: usize },
    Trace(String),
    SpanOutOfBounds { span: (usize, usize), len: usize },
    SpansOverlap,
    EmptySampleId,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ConfidenceOutOfRange { field, value } => {
                write!(f, "confidence out of [0,1]: {field} = {value}")
            }
            Violation::CountMismatch {
                reasons,
                confidences,
            } => write!(
                f,
                "count mismatch: {reasons} reasons but {confidences} confidences"
            ),
            Violation::Trace(e) => write!(f, "invalid trace: {e}"),
            Violation::SpanOutOfBounds { span, len } => {
                write!(f, "span {}..{} out of bounds for text of {len} bytes", span.0, span.1)
            }
            Violation::SpansOverlap => f.write_str("spans overlap or are out of order"),
            Violation::EmptySampleId => f.write_str("empty sample id"),
        }
    }
}

fn unit_interval(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

/// Checks every invariant of a stage record, returning all violations found.
pub fn validate_stage_record(record: &StageRecord) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if record.sample_id.is_empty() {
        out.push(Violation::EmptySampleId);
    }
    for (i, &c) in record.reason_confidences.iter().enumerate() {
        if !unit_interval(c) {
            out.push(Violation::ConfidenceOutOfRange {
                field: format!("reason_confidences[{i}]"),
                value: c,
            });
        }
    }
    if let Some(c) = record.decision_confidence {
        if !unit_interval(c) {
            out.push(Violation::ConfidenceOutOfRange {
                field: "decision_confidence".into(),
                value: c,
            });
        }
    }
    let reasons = record.parsed.reason_count();
    if reasons != record.reason_confidences.len() {
        out.push(Violation::CountMismatch {
            reasons,
            confidences: record.reason_confidences.len(),
        });
    }
    if let Err(e) = record.trace.validate() {
        out.push(Violation::Trace(e.to_string()));
    }
    let len = record.trace.full_text.len();
    let spans = record.parsed.spans_in_order();
    for s in spans.iter().chain(record.parsed.decision_sentences.iter()) {
        if s.char_start >= s.char_end || s.char_end > len {
            out.push(Violation::SpanOutOfBounds {
                span: (s.char_start, s.char_end),
                len,
            });
        }
    }
    if spans.windows(2).any(|w| w[0].char_end > w[1].char_start) {
        out.push(Violation::SpansOverlap);
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// The six per-sample metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Sos,
    Dis,
    Uii,
    Uei,
    Rs,
    Rn,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Sos,
        Metric::Dis,
        Metric::Uii,
        Metric::Uei,
        Metric::Rs,
        Metric::Rn,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Metric::Sos => "SoS",
            Metric::Dis => "DiS",
            Metric::Uii => "UII",
            Metric::Uei => "UEI",
            Metric::Rs => "RS",
            Metric::Rn => "RN",
        }
    }

    /// UII and UEI measure post-hoc reliance, so lower is better there.
    pub fn higher_is_better(&self) -> bool {
        !matches!(self, Metric::Uii | Metric::Uei)
    }
}

/// Why a metric carries no value for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Absence {
    Refusal,
    NoReasons,
    SingleReason,
    NoNewReasons,
    StanceMismatch,
    Nonsensical,
    NecRequiresTwoReasons,
}

impl fmt::Display for Absence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Absence::Refusal => "refusal",
            Absence::NoReasons => "no-reasons",
            Absence::SingleReason => "single-reason",
            Absence::NoNewReasons => "no-new-reasons",
            Absence::StanceMismatch => "stance-mismatch",
            Absence::Nonsensical => "nonsensical",
            Absence::NecRequiresTwoReasons => "nec-requires-two-reasons",
        })
    }
}

/// Factor decomposition of one RS or RN value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeFactors {
    /// `w_S` or `w_N`.
    pub weight: f64,
    pub decision_confidence: f64,
    /// `I_S` or `I_N`; zero when no new reasons were generated.
    pub informativeness: f64,
    pub value: f64,
}

/// Outcome of one uphold-stance probe (one SUF or NEC prompt).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StanceProbe {
    pub reason_index: usize,
    pub decision_kind: DecisionKind,
    pub new_reasons: usize,
    /// Absent for nonsensical or refused decisions.
    pub factors: Option<ProbeFactors>,
}

/// Per-sample metric values, their factors, and reasons for any absences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample_id: String,
    pub source: String,
    pub model_id: String,
    pub stance: Stance,
    pub stance_confidence: Option<f64>,
    pub justify_reasons: usize,
    pub sos: Option<f64>,
    pub dis: Option<f64>,
    pub uii: Option<f64>,
    pub uei: Option<f64>,
    /// Mean RS over the sample's valid sufficiency probes.
    pub rs: Option<f64>,
    /// Mean RN over the sample's valid necessity probes.
    pub rn: Option<f64>,
    pub internal_decision: Option<DecisionKind>,
    pub external_decision: Option<DecisionKind>,
    pub rs_probes: Vec<StanceProbe>,
    pub rn_probes: Vec<StanceProbe>,
    pub absences: BTreeMap<Metric, Absence>,
}

impl MetricRecord {
    pub fn value(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Sos => self.sos,
            Metric::Dis => self.dis,
            Metric::Uii => self.uii,
            Metric::Uei => self.uei,
            Metric::Rs => self.rs,
            Metric::Rn => self.rn,
        }
    }

    /// Every metric must be either present in [0,1] or carry exactly one absence reason.
    pub fn validate(&self) -> Result<(), String> {
        for m in Metric::ALL {
            match (self.value(m), self.absences.get(&m)) {
                (Some(v), None) if unit_interval(v) => {}
                (Some(v), None) => return Err(format!("{} = {v} outside [0,1]", m.label())),
                (None, Some(_)) => {}
                (Some(_), Some(a)) => {
                    return Err(format!("{} has a value and absence {a}", m.label()))
                }
                (None, None) => return Err(format!("{} has no value and no absence", m.label())),
            }
        }
        for p in self.rs_probes.iter().chain(&self.rn_probes) {
            if let Some(f) = p.factors {
                for v in [f.weight, f.decision_confidence, f.informativeness, f.value] {
                    if !unit_interval(v) {
                        return Err(format!("probe {} factor {v} outside [0,1]", p.reason_index));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace() -> GenerationTrace {
        GenerationTrace::new(
            vec![
                TokenRecord::new("The", -0.1),
                TokenRecord::new(" text", -0.2),
                TokenRecord::new(" is", -0.3),
            ],
            "fp",
        )
        .unwrap()
    }

    fn parsed(reasons: usize) -> ParsedExplanation {
        ParsedExplanation {
            decision_span: Some(TextSpan::new(0, 3)),
            decision_text: "The".into(),
            decision_sentences: vec![TextSpan::new(0, 3)],
            reason_spans: (0..reasons).map(|i| TextSpan::new(4 + i * 2, 5 + i * 2)).collect(),
            reason_texts: vec!["x".into(); reasons],
            stance: Stance::Toxic,
            decision_kind: None,
            refusal: false,
            source_fingerprint: "fp".into(),
        }
    }

    fn record(reasons: usize, confidences: Vec<f64>) -> StageRecord {
        StageRecord {
            sample_id: "s1".into(),
            stage: StageKind::Justify,
            model_id: "m".into(),
            prompt_text: "p".into(),
            trace: trace(),
            parsed: parsed(reasons),
            reason_confidences: confidences,
            decision_confidence: Some(0.5),
            started_at_ms: 0,
            finished_at_ms: 0,
        }
    }

    #[test]
    fn confidence_above_one_is_reported() {
        let errs = validate_stage_record(&record(1, vec![1.2])).unwrap_err();
        assert!(errs
            .iter()
            .any(|v| v.to_string().starts_with("confidence out of [0,1]")));
    }

    #[test]
    fn reason_confidence_count_mismatch() {
        let errs = validate_stage_record(&record(3, vec![0.1, 0.2])).unwrap_err();
        assert!(errs.iter().any(|v| matches!(
            v,
            Violation::CountMismatch {
                reasons: 3,
                confidences: 2
            }
        )));
    }

    #[test]
    fn consistent_record_is_ok() {
        assert_eq!(validate_stage_record(&record(2, vec![0.3, 0.9])), Ok(()));
    }

    #[test]
    fn trace_rejects_positive_logprob_and_text_mismatch() {
        assert_eq!(
            GenerationTrace::new(vec![TokenRecord::new("a", 0.5)], "x").unwrap_err(),
            TraceError::InvalidLogprob {
                index: 0,
                value: 0.5
            }
        );
        let mut t = trace();
        t.full_text.push(' ');
        assert_eq!(t.validate(), Err(TraceError::TextMismatch));
        assert_eq!(GenerationTrace::new(vec![], "x"), Err(TraceError::Empty));
    }

    #[test]
    fn token_offsets_tile_the_text() {
        let t = trace();
        let offs = t.token_offsets();
        assert_eq!(offs, vec![0..3, 3..8, 8..11]);
        assert_eq!(offs.last().unwrap().end, t.full_text.len());
    }

    #[test]
    fn stage_kind_serializes_with_index() {
        let s = serde_json::to_string(&StageKind::UpholdStanceNecessity(2)).unwrap();
        assert_eq!(s, r#"{"kind":"uphold_stance_necessity","index":2}"#);
        let j = serde_json::to_string(&StageKind::Justify).unwrap();
        assert_eq!(j, r#"{"kind":"justify"}"#);
        let back: StageKind = serde_json::from_str(&s).unwrap();
        assert_eq!(back, StageKind::UpholdStanceNecessity(2));
    }

    #[test]
    fn sample_probability_bounds() {
        let mut s = InputSample {
            id: "a".into(),
            text: "t".into(),
            toxicity_label: None,
            toxicity_prob: Some(1.3),
            source: "cc".into(),
        };
        assert!(s.validate().is_err());
        s.toxicity_prob = Some(0.8);
        assert!(s.validate().is_ok());
        s.text.clear();
        assert!(s.validate().is_err());
    }
}
