//! Runs the Justify, Uphold-Reason and Uphold-Stance stages per sample,
//! scores them and persists every record.

mod prompts;
mod store;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use prompts::{build_prompt, numbered_list, PromptError, PromptTemplates};
pub use store::{index_stages, RunManifest, RunStore, SampleError, StoreError, STAGE_STEMS};

use crate::backend::{Backend, BackendError, GenerationParams};
use crate::metrics::{planned_uphold_stages, sample_metrics, MetricWeights, SampleStages};
use crate::model::{
    GenerationTrace, InputSample, MetricRecord, ParsedExplanation, StageKind, StageRecord, Stance,
};
use crate::parsing::{analyze, ClassifierRules, ParseError};
use crate::similarity::{Similarity, SimilarityError};
use crate::uncertainty::{
    parsed_decision_confidence, reason_confidences, DecisionConfidenceMode, UncertaintyError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("similarity: {0}")]
    Similarity(#[from] SimilarityError),
    #[error("parse: {0}")]
    Parse(#[from] ParseError),
    #[error("uncertainty: {0}")]
    Uncertainty(#[from] UncertaintyError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("sample {0} has no Justify record")]
    MissingJustify(String),
    #[error("run stopped: {0}")]
    Stopped(String),
}

impl PipelineError {
    pub fn is_fatal(&self) -> bool {
        match self {
            PipelineError::Backend(e) => e.is_fatal(),
            PipelineError::Store(_) | PipelineError::Stopped(_) => true,
            _ => false,
        }
    }
}

/// Source of wall-clock timestamps for stage records.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }
}

/// Always reports the same instant; makes run bytes reproducible.
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub templates: PromptTemplates,
    pub params: GenerationParams,
    pub weights: MetricWeights,
    pub decision_mode: DecisionConfidenceMode,
    /// Samples processed in parallel.
    pub concurrency: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            templates: PromptTemplates::default(),
            params: GenerationParams::default(),
            weights: MetricWeights::default(),
            decision_mode: DecisionConfidenceMode::default(),
            concurrency: 8,
        }
    }
}

/// Everything produced for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub stages: Vec<StageRecord>,
    pub metrics: MetricRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub total: usize,
    pub completed: usize,
    pub already_complete: usize,
    pub failed: Vec<SampleError>,
    pub fatal: Option<String>,
}

impl RunReport {
    pub fn is_complete(&self) -> bool {
        self.fatal.is_none() && self.failed.is_empty()
    }
}

/// Confidences of a stage's reasons and decision, recomputed from its trace.
pub fn score_stage(
    trace: &GenerationTrace,
    parsed: &ParsedExplanation,
    sim: &Similarity,
    mode: DecisionConfidenceMode,
) -> Result<(Vec<f64>, Option<f64>), UncertaintyError> {
    Ok((
        reason_confidences(trace, parsed, sim)?,
        parsed_decision_confidence(trace, parsed, sim, mode)?,
    ))
}

/// Metrics of a sample from its stage records.
pub fn metrics_from_stages(
    sample: &InputSample,
    stages: &BTreeMap<StageKind, StageRecord>,
    sim: &Similarity,
    weights: &MetricWeights,
) -> Result<MetricRecord, PipelineError> {
    let justify = stages
        .get(&StageKind::Justify)
        .ok_or_else(|| PipelineError::MissingJustify(sample.id.clone()))?;
    let suf: Vec<StageRecord> = stages
        .values()
        .filter(|r| matches!(r.stage, StageKind::UpholdStanceSufficiency(_)))
        .cloned()
        .collect();
    let nec: Vec<StageRecord> = stages
        .values()
        .filter(|r| matches!(r.stage, StageKind::UpholdStanceNecessity(_)))
        .cloned()
        .collect();
    Ok(sample_metrics(
        &SampleStages {
            sample,
            justify,
            internal: stages.get(&StageKind::UpholdReasonInternal),
            external: stages.get(&StageKind::UpholdReasonExternal),
            sufficiency: &suf,
            necessity: &nec,
        },
        sim,
        weights,
    )?)
}

pub struct Pipeline {
    backend: Arc<dyn Backend>,
    sim: Similarity,
    rules: Arc<ClassifierRules>,
    config: PipelineConfig,
    clock: Arc<dyn Clock>,
}

impl Pipeline {
    pub fn new(
        backend: Arc<dyn Backend>,
        sim: Similarity,
        rules: Arc<ClassifierRules>,
        config: PipelineConfig,
    ) -> Self {
        Self {
            backend,
            sim,
            rules,
            config,
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn similarity(&self) -> &Similarity {
        &self.sim
    }

    /// Sends one prompt and scores the response.
    fn run_stage(
        &self,
        sample: &InputSample,
        stage: StageKind,
        prompt: String,
    ) -> Result<StageRecord, PipelineError> {
        let started_at_ms = self.clock.now_ms();
        let trace = self.backend.complete(&prompt, &self.config.params)?;
        let parsed = analyze(&trace, stage, &self.rules, &self.sim)?;
        let (reason_confidences, decision_confidence) =
            score_stage(&trace, &parsed, &self.sim, self.config.decision_mode)?;
        Ok(StageRecord {
            sample_id: sample.id.clone(),
            stage,
            model_id: self.backend.model_id().to_string(),
            prompt_text: prompt,
            trace,
            parsed,
            reason_confidences,
            decision_confidence,
            started_at_ms,
            finished_at_ms: self.clock.now_ms(),
        })
    }

    /// Runs every stage a sample needs. Stages already in `done` with an
    /// identical prompt are reused rather than re-requested; each new record is
    /// passed to `persist` as soon as it exists.
    pub fn run_sample_with(
        &self,
        sample: &InputSample,
        done: &BTreeMap<StageKind, StageRecord>,
        persist: &dyn Fn(&StageRecord) -> Result<(), StoreError>,
    ) -> Result<SampleOutcome, PipelineError> {
        let mut records: BTreeMap<StageKind, StageRecord> = BTreeMap::new();
        let obtain = |stage: StageKind, prompt: String| -> Result<StageRecord, PipelineError> {
            if let Some(r) = done.get(&stage).filter(|r| r.prompt_text == prompt) {
                return Ok(r.clone());
            }
            let r = self.run_stage(sample, stage, prompt)?;
            persist(&r)?;
            Ok(r)
        };

        let t = &self.config.templates;
        let prompt = build_prompt(t, StageKind::Justify, &sample.text, Stance::Unresolved, &[])?;
        let justify = obtain(StageKind::Justify, prompt)?;
        let stance = justify.parsed.stance;
        let reasons = justify.parsed.reason_texts.clone();
        records.insert(StageKind::Justify, justify);

        if !records[&StageKind::Justify].parsed.refusal {
            for stage in planned_uphold_stages(stance, reasons.len()) {
                let prompt = build_prompt(t, stage, &sample.text, stance, &reasons)?;
                let r = obtain(stage, prompt)?;
                records.insert(stage, r);
            }
        }
        let metrics = metrics_from_stages(sample, &records, &self.sim, &self.config.weights)?;
        Ok(SampleOutcome {
            stages: records.into_values().collect(),
            metrics,
        })
    }

    /// Runs one sample with no persistence.
    pub fn run_sample(&self, sample: &InputSample) -> Result<SampleOutcome, PipelineError> {
        self.run_sample_with(sample, &BTreeMap::new(), &|_| Ok(()))
    }

    /// Processes samples with bounded parallelism, persisting into `store`.
    ///
    /// Samples whose metrics already exist are skipped; partially processed
    /// samples resume from their persisted stages. A fatal error (missing
    /// logprobs, storage failure) stops new samples from starting.
    pub fn run_dataset(
        &self,
        samples: &[InputSample],
        store: &RunStore,
    ) -> Result<RunReport, PipelineError> {
        let finished: std::collections::HashSet<String> = store
            .load_metrics()?
            .into_iter()
            .map(|m| m.sample_id)
            .collect();
        let prior = index_stages(store.load_stages()?);
        let todo: Vec<&InputSample> = samples.iter().filter(|s| !finished.contains(&s.id)).collect();

        let report = Mutex::new(RunReport {
            total: samples.len(),
            already_complete: samples.len() - todo.len(),
            ..Default::default()
        });
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let empty = BTreeMap::new();
        let workers = self.config.concurrency.max(1).min(todo.len().max(1));

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(sample) = todo.get(i) else {
                        break;
                    };
                    let done = prior.get(&sample.id).unwrap_or(&empty);
                    let result = self
                        .run_sample_with(sample, done, &|r| store.append_stage(r))
                        .and_then(|o| store.append_metric(&o.metrics).map_err(PipelineError::from));
                    let mut rep = report.lock().unwrap_or_else(|e| e.into_inner());
                    match result {
                        Ok(()) => rep.completed += 1,
                        Err(e) if e.is_fatal() => {
                            stop.store(true, Ordering::SeqCst);
                            if rep.fatal.is_none() {
                                rep.fatal = Some(e.to_string());
                            }
                        }
                        Err(e) => {
                            let err = SampleError {
                                sample_id: sample.id.clone(),
                                error: e.to_string(),
                            };
                            if let Err(se) = store.append_error(&err) {
                                stop.store(true, Ordering::SeqCst);
                                rep.fatal.get_or_insert(se.to_string());
                            }
                            rep.failed.push(err);
                        }
                    }
                });
            }
        });

        store.canonicalize()?;
        if let Some(cache) = self.sim.cache() {
            cache.compact()?;
        }
        let mut report = report.into_inner().unwrap_or_else(|e| e.into_inner());
        report.failed.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        Ok(report)
    }
}

/// Recomputes confidences and metrics of a finished run from its persisted
/// traces and parses. Every similarity comes through `sim`, which for an
/// offline rescore should be a cache-only provider.
pub fn rescore_run(
    samples: &[InputSample],
    stages: Vec<StageRecord>,
    sim: &Similarity,
    weights: &MetricWeights,
    mode: DecisionConfidenceMode,
) -> Result<Vec<MetricRecord>, PipelineError> {
    let mut by_sample = index_stages(stages);
    let mut out = Vec::new();
    for sample in samples {
        let Some(records) = by_sample.get_mut(&sample.id) else {
            continue;
        };
        if !records.contains_key(&StageKind::Justify) {
            continue;
        }
        for r in records.values_mut() {
            let (rc, dc) = score_stage(&r.trace, &r.parsed, sim, mode)?;
            r.reason_confidences = rc;
            r.decision_confidence = dc;
        }
        out.push(metrics_from_stages(sample, records, sim, weights)?);
    }
    out.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(out)
}
