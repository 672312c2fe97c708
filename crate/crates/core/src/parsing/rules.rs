use std::collections::BTreeMap;
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DecisionKind, Stance};

const DEFAULT_RULES: &str = include_str!("../../data/default_rules.json");

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("rules file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("rules JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad pattern {pattern:?}: {source}")]
    Pattern {
        pattern: String,
        source: regex::Error,
    },
    #[error("invalid rules: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StanceRule {
    pub pattern: String,
    pub stance: Stance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SufficiencyRule {
    pub pattern: String,
    pub kind: DecisionKind,
}

/// On-disk rules file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RulesFile {
    pub version: String,
    pub stance_rules: Vec<StanceRule>,
    pub sufficiency_rules: Vec<SufficiencyRule>,
    pub refusal_patterns: Vec<String>,
    pub anchors: BTreeMap<DecisionKind, Vec<String>>,
    pub similarity_floor: f64,
}

/// Compiled keyword and anchor tables for stance and sufficiency classification.
///
/// Patterns are case-insensitive regular expressions; within a list the first
/// matching rule wins.
#[derive(Debug, Clone)]
pub struct ClassifierRules {
    pub source: RulesFile,
    pub(crate) stance: Vec<(Regex, Stance)>,
    pub(crate) sufficiency: Vec<(Regex, DecisionKind)>,
    pub(crate) refusal: Vec<Regex>,
}

fn compile(pattern: &str) -> Result<Regex, RulesError> {
    RegexBuilder::new(pattern)
        .case_insensitive(true)
        .build()
        .map_err(|source| RulesError::Pattern {
            pattern: pattern.to_string(),
            source,
        })
}

impl ClassifierRules {
    pub fn from_file_contents(raw: &RulesFile) -> Result<Self, RulesError> {
        if raw.stance_rules.is_empty() || raw.sufficiency_rules.is_empty() {
            return Err(RulesError::Invalid("rule lists must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&raw.similarity_floor) {
            return Err(RulesError::Invalid(format!(
                "similarity_floor {} outside [0,1]",
                raw.similarity_floor
            )));
        }
        if raw
            .anchors
            .keys()
            .any(|k| matches!(k, DecisionKind::Nonsensical | DecisionKind::Refusal))
        {
            return Err(RulesError::Invalid(
                "anchors may only name sufficient, insufficient or doubtful".into(),
            ));
        }
        Ok(Self {
            stance: raw
                .stance_rules
                .iter()
                .map(|r| Ok((compile(&r.pattern)?, r.stance)))
                .collect::<Result<_, RulesError>>()?,
            sufficiency: raw
                .sufficiency_rules
                .iter()
                .map(|r| Ok((compile(&r.pattern)?, r.kind)))
                .collect::<Result<_, RulesError>>()?,
            refusal: raw
                .refusal_patterns
                .iter()
                .map(|p| compile(p))
                .collect::<Result<_, _>>()?,
            source: raw.clone(),
        })
    }

    pub fn from_json(json: &str) -> Result<Self, RulesError> {
        Self::from_file_contents(&serde_json::from_str(json)?)
    }

    pub fn load(path: &Path) -> Result<Self, RulesError> {
        let raw = std::fs::read_to_string(path).map_err(|source| RulesError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&raw)
    }

    pub fn version(&self) -> &str {
        &self.source.version
    }

    pub fn similarity_floor(&self) -> f64 {
        self.source.similarity_floor
    }

    pub fn anchors(&self) -> &BTreeMap<DecisionKind, Vec<String>> {
        &self.source.anchors
    }
}

impl Default for ClassifierRules {
    fn default() -> Self {
        Self::from_json(DEFAULT_RULES).expect("bundled rules are valid")
    }
}
