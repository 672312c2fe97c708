use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::GenerationParams;
use crate::ingestion::SamplingPolicy;
use crate::metrics::MetricWeights;
use crate::model::{MetricRecord, StageKind, StageRecord};
use crate::uncertainty::DecisionConfidenceMode;

use super::prompts::PromptTemplates;

pub const STAGE_STEMS: [&str; 5] = [
    "justify",
    "uphold_internal",
    "uphold_external",
    "uphold_suf",
    "uphold_nec",
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt record at {path} line {line}: {message}")]
    CorruptRecord {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{0} not found")]
    Missing(String),
    #[error("existing run was made with a different {0}")]
    ManifestMismatch(String),
}

/// Everything needed to interpret or resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub model_id: String,
    pub endpoint: String,
    pub params: GenerationParams,
    pub weights: MetricWeights,
    pub rules_version: String,
    pub similarity_provider: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingPolicy>,
    pub templates: PromptTemplates,
    #[serde(default)]
    pub decision_mode: DecisionConfidenceMode,
    pub concurrency: usize,
}

/// A sample that failed without stopping the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub sample_id: String,
    pub error: String,
}

/// A run directory with append-only JSONL record files.
pub struct RunStore {
    root: PathBuf,
    files: Mutex<HashMap<String, File>>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads every complete line of a JSONL file. A torn final line (no newline)
/// is cut off so later appends start clean.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let complete = text.rfind('\n').map_or(0, |i| i + 1);
    if complete < text.len() {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        f.set_len(complete as u64).map_err(io_err(path))?;
    }
    let mut out = Vec::new();
    for (i, line) in text[..complete].lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| StoreError::CorruptRecord {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

fn write_atomic(path: &Path, body: &str) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, body).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn to_lines<T: Serialize>(items: &[T]) -> String {
    let mut body = String::new();
    for item in items {
        body.push_str(&serde_json::to_string(item).expect("record serializes"));
        body.push('\n');
    }
    body
}

impl RunStore {
    /// Opens a run directory, creating it and `stages/` if needed.
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(root.join("stages")).map_err(io_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Mutex::new(HashMap::new()),
        })
    }

    /// Opens an existing run directory without creating anything.
    pub fn open_existing(root: &Path) -> Result<Self, StoreError> {
        if !root.join("stages").is_dir() {
            return Err(StoreError::Missing(root.join("stages").display().to_string()));
        }
        Self::open(root)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn inputs_path(&self) -> PathBuf {
        self.root.join("inputs.jsonl")
    }
    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn errors_path(&self) -> PathBuf {
        self.root.join("errors.jsonl")
    }
    pub fn cache_path(&self) -> PathBuf {
        self.root.join("similarity_cache.jsonl")
    }
    pub fn stage_path(&self, stem: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stem}.jsonl"))
    }

    pub fn write_manifest(&self, m: &RunManifest) -> Result<(), StoreError> {
        let mut body = serde_json::to_string_pretty(m).expect("manifest serializes");
        body.push('\n');
        write_atomic(&self.manifest_path(), &body)
    }

    pub fn read_manifest(&self) -> Result<RunManifest, StoreError> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(StoreError::Missing(path.display().to_string()));
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| StoreError::CorruptRecord {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Appends one record as a single write of one line.
    fn append<T: Serialize>(&self, path: PathBuf, record: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let key = path.display().to_string();
        let mut files = self.files.lock().unwrap_or_else(|e| e.into_inner());
        if !files.contains_key(&key) {
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            files.insert(key.clone(), f);
        }
        let f = files.get_mut(&key).expect("just inserted");
        f.write_all(line.as_bytes()).map_err(io_err(&path))?;
        f.flush().map_err(io_err(&path))
    }

    pub fn append_stage(&self, r: &StageRecord) -> Result<(), StoreError> {
        self.append(self.stage_path(r.stage.file_stem()), r)
    }

    pub fn append_metric(&self, r: &MetricRecord) -> Result<(), StoreError> {
        self.append(self.metrics_path(), r)
    }

    pub fn append_error(&self, e: &SampleError) -> Result<(), StoreError> {
        self.append(self.errors_path(), e)
    }

    pub fn load_stages(&self) -> Result<Vec<StageRecord>, StoreError> {
        let mut out = Vec::new();
        for stem in STAGE_STEMS {
            out.extend(read_jsonl::<StageRecord>(&self.stage_path(stem))?);
        }
        Ok(out)
    }

    pub fn load_metrics(&self) -> Result<Vec<MetricRecord>, StoreError> {
        read_jsonl(&self.metrics_path())
    }

    pub fn load_errors(&self) -> Result<Vec<SampleError>, StoreError> {
        read_jsonl(&self.errors_path())
    }

    /// Replaces `metrics.jsonl` wholesale.
    pub fn replace_metrics(&self, records: &[MetricRecord]) -> Result<(), StoreError> {
        self.files
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(&self.metrics_path().display().to_string());
        let mut sorted = records.to_vec();
        sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        write_atomic(&self.metrics_path(), &to_lines(&sorted))
    }

    /// Rewrites every record file sorted by sample and stage, keeping the last
    /// record per key, and drops errors of samples that later completed.
    /// Makes the bytes of a run independent of thread scheduling.
    pub fn canonicalize(&self) -> Result<(), StoreError> {
        self.files.lock().unwrap_or_else(|e| e.into_inner()).clear();
        for stem in STAGE_STEMS {
            let path = self.stage_path(stem);
            if !path.exists() {
                continue;
            }
            let mut latest: BTreeMap<(String, (u8, usize)), StageRecord> = BTreeMap::new();
            for r in read_jsonl::<StageRecord>(&path)? {
                latest.insert((r.sample_id.clone(), r.stage.order_key()), r);
            }
            write_atomic(&path, &to_lines(&latest.into_values().collect::<Vec<_>>()))?;
        }
        let mut metrics: BTreeMap<String, MetricRecord> = BTreeMap::new();
        for m in self.load_metrics()? {
            metrics.insert(m.sample_id.clone(), m);
        }
        if self.metrics_path().exists() {
            write_atomic(
                &self.metrics_path(),
                &to_lines(&metrics.values().cloned().collect::<Vec<_>>()),
            )?;
        }
        if self.errors_path().exists() {
            let errors: BTreeSet<(String, String)> = self
                .load_errors()?
                .into_iter()
                .filter(|e| !metrics.contains_key(&e.sample_id))
                .map(|e| (e.sample_id, e.error))
                .collect();
            let errors: Vec<SampleError> = errors
                .into_iter()
                .map(|(sample_id, error)| SampleError { sample_id, error })
                .collect();
            write_atomic(&self.errors_path(), &to_lines(&errors))?;
        }
        Ok(())
    }
}

/// Groups stage records by sample and then by stage.
pub fn index_stages(records: Vec<StageRecord>) -> BTreeMap<String, BTreeMap<StageKind, StageRecord>> {
    let mut out: BTreeMap<String, BTreeMap<StageKind, StageRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.sample_id.clone()).or_default().insert(r.stage, r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GenerationTrace, ParsedExplanation, Stance, TokenRecord};

    fn record(id: &str, stage: StageKind) -> StageRecord {
        let trace = GenerationTrace::new(vec![TokenRecord::new("No.", -0.1)], "fp").unwrap();
        StageRecord {
            sample_id: id.into(),
            stage,
            model_id: "m".into(),
            prompt_text: "p".into(),
            parsed: ParsedExplanation {
                decision_span: None,
                decision_text: String::new(),
                decision_sentences: vec![],
                reason_spans: vec![],
                reason_texts: vec![],
                stance: Stance::Unresolved,
                decision_kind: None,
                refusal: false,
                source_fingerprint: "x".into(),
            },
            trace,
            reason_confidences: vec![],
            decision_confidence: None,
            started_at_ms: 0,
            finished_at_ms: 0,
        }
    }

    #[test]
    fn append_load_and_canonicalize() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        store.append_stage(&record("b", StageKind::Justify)).unwrap();
        store.append_stage(&record("a", StageKind::UpholdStanceSufficiency(1))).unwrap();
        store.append_stage(&record("a", StageKind::UpholdStanceSufficiency(0))).unwrap();
        store.append_stage(&record("a", StageKind::Justify)).unwrap();
        store
            .append_error(&SampleError {
                sample_id: "z".into(),
                error: "boom".into(),
            })
            .unwrap();
        store.canonicalize().unwrap();
        let loaded = store.load_stages().unwrap();
        let keys: Vec<(String, StageKind)> =
            loaded.iter().map(|r| (r.sample_id.clone(), r.stage)).collect();
        assert_eq!(
            keys,
            vec![
                ("a".into(), StageKind::Justify),
                ("b".into(), StageKind::Justify),
                ("a".into(), StageKind::UpholdStanceSufficiency(0)),
                ("a".into(), StageKind::UpholdStanceSufficiency(1)),
            ]
        );
        assert_eq!(store.load_errors().unwrap().len(), 1);
        let idx = index_stages(loaded);
        assert_eq!(idx["a"].len(), 3);
    }

    #[test]
    fn torn_tail_is_dropped_but_corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        store.append_stage(&record("a", StageKind::Justify)).unwrap();
        let p = store.stage_path("justify");
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push_str("{\"sample_id\":");
        std::fs::write(&p, &text).unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        assert_eq!(store.load_stages().unwrap().len(), 1);
        store.append_stage(&record("b", StageKind::Justify)).unwrap();
        assert_eq!(store.load_stages().unwrap().len(), 2);

        std::fs::write(&p, "garbage\n").unwrap();
        match store.load_stages() {
            Err(StoreError::CorruptRecord { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected corrupt record, got {other:?}"),
        }
    }

    #[test]
    fn open_existing_requires_stages() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            RunStore::open_existing(dir.path()),
            Err(StoreError::Missing(_))
        ));
    }
}
