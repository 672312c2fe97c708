//! Loading toxicity datasets and applying the length, band and sampling filters.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{InputSample, ToxicityLabel};

#[derive(Debug, Error)]
pub enum IngestionError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing column {column:?}{}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    MissingColumn { column: String, line: Option<usize> },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid sampling policy: {0}")]
    InvalidPolicy(String),
}

/// Column names of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaMap {
    pub text: String,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub probability: Option<String>,
    /// Name recorded as `source` on every sample; defaults to the file stem.
    #[serde(default)]
    pub source: Option<String>,
}

impl SchemaMap {
    pub fn validate(&self) -> Result<(), IngestionError> {
        match (&self.label, &self.probability) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(IngestionError::InvalidSchema(
                "exactly one of label and probability must be named".into(),
            )),
        }
    }
}

/// A probability interval with configurable end inclusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub low: f64,
    pub high: f64,
    pub low_inclusive: bool,
    pub high_inclusive: bool,
}

impl Band {
    pub fn contains(&self, p: f64) -> bool {
        let above = if self.low_inclusive { p >= self.low } else { p > self.low };
        let below = if self.high_inclusive { p <= self.high } else { p < self.high };
        above && below
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPolicy {
    pub min_chars: usize,
    pub max_chars: usize,
    pub mild_band: Band,
    pub high_band: Band,
    pub sample_size: usize,
    pub rng_seed: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            min_chars: 64,
            max_chars: 1024,
            mild_band: Band {
                low: 0.5,
                high: 0.6,
                low_inclusive: true,
                high_inclusive: true,
            },
            high_band: Band {
                low: 0.75,
                high: 1.0,
                low_inclusive: false,
                high_inclusive: true,
            },
            sample_size: 1024,
            rng_seed: 0,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<(), IngestionError> {
        if self.min_chars >= self.max_chars {
            return Err(IngestionError::InvalidPolicy(
                "min_chars must be below max_chars".into(),
            ));
        }
        for b in [&self.mild_band, &self.high_band] {
            if !(0.0..=1.0).contains(&b.low) || !(0.0..=1.0).contains(&b.high) || b.low > b.high {
                return Err(IngestionError::InvalidPolicy(format!(
                    "band [{}, {}] not within [0,1]",
                    b.low, b.high
                )));
            }
        }
        Ok(())
    }
}

/// A skipped row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MalformedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct LoadReport {
    pub rows: usize,
    pub loaded: usize,
    pub malformed: Vec<MalformedRow>,
}

/// Counts at each filtering step, plus the realized band mix of the sample.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct SamplingReport {
    pub input: usize,
    pub after_length: usize,
    pub after_band: usize,
    pub sampled: usize,
    pub band_mix: BTreeMap<String, usize>,
}

fn parse_label(v: &Value) -> Option<ToxicityLabel> {
    let s = match v {
        Value::Bool(b) => return Some(if *b { ToxicityLabel::Toxic } else { ToxicityLabel::NonToxic }),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.trim().to_lowercase(),
        _ => return None,
    };
    match s.as_str() {
        "1" | "1.0" | "true" | "toxic" | "yes" | "hate" | "offensive" => Some(ToxicityLabel::Toxic),
        "0" | "0.0" | "false" | "non-toxic" | "nontoxic" | "non_toxic" | "no" | "normal" => {
            Some(ToxicityLabel::NonToxic)
        }
        _ => Some(ToxicityLabel::Unknown),
    }
}

fn parse_prob(v: &Value) -> Result<f64, String> {
    let p = match v {
        Value::Number(n) => n.as_f64().ok_or("non-finite probability")?,
        Value::String(s) => s
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("probability {s:?} is not a number"))?,
        other => return Err(format!("probability {other} is not a number")),
    };
    if !(0.0..=1.0).contains(&p) {
        return Err(format!("probability {p} outside [0,1]"));
    }
    Ok(p)
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn build_sample(
    get: &dyn Fn(&str) -> Option<Value>,
    schema: &SchemaMap,
    source: &str,
    line: usize,
) -> Result<InputSample, String> {
    let text = match get(&schema.text) {
        Some(Value::String(s)) if !s.trim().is_empty() => s,
        Some(Value::String(_)) => return Err("empty text".into()),
        _ => return Err("text is not a string".into()),
    };
    let id = match schema.id.as_deref().and_then(get) {
        Some(v) if !value_text(&v).is_empty() => value_text(&v),
        _ => format!("{source}-{line}"),
    };
    let mut sample = InputSample {
        id,
        text,
        toxicity_label: None,
        toxicity_prob: None,
        source: source.to_string(),
    };
    if let Some(col) = &schema.label {
        let v = get(col).ok_or_else(|| format!("missing {col}"))?;
        sample.toxicity_label = Some(parse_label(&v).ok_or("label is not a scalar")?);
    }
    if let Some(col) = &schema.probability {
        let v = get(col).ok_or_else(|| format!("missing {col}"))?;
        sample.toxicity_prob = Some(parse_prob(&v)?);
    }
    Ok(sample)
}

/// Loads a JSONL (`.jsonl`, `.json`) or CSV file into samples carrying only
/// id, text, label or probability, and source. Malformed rows are skipped and
/// reported; a missing text column is fatal.
pub fn load_dataset(
    path: &Path,
    schema: &SchemaMap,
) -> Result<(Vec<InputSample>, LoadReport), IngestionError> {
    schema.validate()?;
    let io = |source| IngestionError::Io {
        path: path.display().to_string(),
        source,
    };
    let source = schema.source.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let mut out = Vec::new();
    let mut report = LoadReport::default();
    let mut seen = HashSet::new();
    let mut accept = |r: Result<InputSample, String>, line: usize, report: &mut LoadReport| match r {
        Ok(s) if !seen.insert(s.id.clone()) => report.malformed.push(MalformedRow {
            line,
            reason: format!("duplicate id {}", s.id),
        }),
        Ok(s) => out.push(s),
        Err(reason) => report.malformed.push(MalformedRow { line, reason }),
    };

    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let file = std::fs::File::open(path).map_err(io)?;
        let mut rdr = csv::Reader::from_reader(file);
        let headers = rdr.headers()?.clone();
        let required = [Some(&schema.text), schema.label.as_ref(), schema.probability.as_ref()];
        for col in required.into_iter().flatten() {
            if !headers.iter().any(|h| h == col) {
                return Err(IngestionError::MissingColumn {
                    column: col.clone(),
                    line: None,
                });
            }
        }
        for (i, row) in rdr.records().enumerate() {
            let line = i + 2;
            report.rows += 1;
            let row = match row {
                Ok(r) => r,
                Err(e) => {
                    report.malformed.push(MalformedRow {
                        line,
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            let get = |col: &str| {
                headers
                    .iter()
                    .position(|h| h == col)
                    .and_then(|p| row.get(p))
                    .map(|s| Value::String(s.to_string()))
            };
            accept(build_sample(&get, schema, &source, line), line, &mut report);
        }
    } else {
        let reader = BufReader::new(File::open(path).map_err(io)?);
        for (i, line_text) in reader.lines().enumerate() {
            let line = i + 1;
            let line_text = line_text.map_err(io)?;
            if line_text.trim().is_empty() {
                continue;
            }
            report.rows += 1;
            let obj = match serde_json::from_str::<Value>(&line_text) {
                Ok(Value::Object(o)) => o,
                Ok(_) => {
                    report.malformed.push(MalformedRow {
                        line,
                        reason: "not a JSON object".into(),
                    });
                    continue;
                }
                Err(e) => {
                    report.malformed.push(MalformedRow {
                        line,
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            if !obj.contains_key(&schema.text) {
                return Err(IngestionError::MissingColumn {
                    column: schema.text.clone(),
                    line: Some(line),
                });
            }
            let get = |col: &str| obj.get(col).cloned();
            accept(build_sample(&get, schema, &source, line), line, &mut report);
        }
    }
    report.loaded = out.len();
    Ok((out, report))
}

fn band_of(sample: &InputSample, policy: &SamplingPolicy) -> Option<&'static str> {
    match (sample.toxicity_prob, sample.toxicity_label) {
        (Some(p), _) if policy.mild_band.contains(p) => Some("mild"),
        (Some(p), _) if policy.high_band.contains(p) => Some("high"),
        (Some(_), _) => None,
        (None, Some(ToxicityLabel::Toxic)) => Some("label_toxic"),
        _ => None,
    }
}

/// Applies the length and band filters, then draws up to `sample_size` rows
/// uniformly without replacement. Output order is the draw order.
pub fn filter_and_sample(
    samples: Vec<InputSample>,
    policy: &SamplingPolicy,
) -> Result<(Vec<InputSample>, SamplingReport), IngestionError> {
    policy.validate()?;
    let mut report = SamplingReport {
        input: samples.len(),
        ..Default::default()
    };
    let by_length: Vec<InputSample> = samples
        .into_iter()
        .filter(|s| {
            let n = s.text.chars().count();
            n >= policy.min_chars && n <= policy.max_chars
        })
        .collect();
    report.after_length = by_length.len();
    let kept: Vec<InputSample> = by_length
        .into_iter()
        .filter(|s| band_of(s, policy).is_some())
        .collect();
    report.after_band = kept.len();

    let mut rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
    let k = policy.sample_size.min(kept.len());
    let picks = rand::seq::index::sample(&mut rng, kept.len(), k);
    let mut slots: Vec<Option<InputSample>> = kept.into_iter().map(Some).collect();
    let chosen: Vec<InputSample> = picks
        .into_iter()
        .filter_map(|i| slots[i].take())
        .collect();
    report.sampled = chosen.len();
    for s in &chosen {
        if let Some(b) = band_of(s, policy) {
            *report.band_mix.entry(b.to_string()).or_insert(0) += 1;
        }
    }
    Ok((chosen, report))
}

/// Writes samples as one JSON object per line.
pub fn write_samples(path: &Path, samples: &[InputSample]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn read_samples(path: &Path) -> Result<Vec<InputSample>, IngestionError> {
    let io = |source| IngestionError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IngestionError::Io {
            path: format!("{} line {}", path.display(), i + 1),
            source: e.into(),
        })?);
    }
    Ok(out)
}
