//! `haf` subcommands. Each returns a process exit code: 0 on success, 1 on a
//! fatal configuration, backend or I/O error, 2 when a run finished with some
//! samples failed.

mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    interpolate, interpolate_str, BackendConfig, Config, ConfigError, ProviderConfig,
    DEFAULT_API_KEY_ENV,
};

use crate::ingestion::{self, IngestionError, SamplingReport};
use crate::metrics::MetricWeights;
use crate::model::StageKind;
use crate::pipeline::{
    rescore_run, Clock, PipelineConfig, PipelineError, Pipeline, RunManifest, RunReport, RunStore,
    StoreError, SystemClock,
};
use crate::reporting::{self, ExportFormat, ReportError};
use crate::similarity::{
    compare_providers, PairSet, ProviderDiff, ReplayProvider, ScoreCache, Similarity,
    SimilarityError,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FATAL: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingestion(#[from] IngestionError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("{0}")]
    Usage(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Store(StoreError::Io {
            path: String::new(),
            source: e,
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "haf", version, about = "Faithfulness metrics for LLM toxicity explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset, query the model through every stage and score it.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from persisted traces, without network access.
    Score {
        #[arg(long)]
        run: PathBuf,
        /// JSON file with metric weights; defaults to the run's own.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Write summary tables for a run.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// json, csv or md.
        #[arg(long)]
        format: String,
    },
    /// Mean absolute difference between two similarity providers on a run's pairs.
    CompareSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
}

/// What `cmd_run` did.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub sampling: Option<SamplingReport>,
    pub report: RunReport,
}

impl RunOutcome {
    pub fn exit_code(&self) -> u8 {
        if self.report.fatal.is_some() {
            EXIT_FATAL
        } else if self.report.is_complete() {
            EXIT_OK
        } else {
            EXIT_PARTIAL
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fields that must agree for an existing run directory to be resumed.
fn check_resumable(old: &RunManifest, new: &RunManifest) -> Result<(), StoreError> {
    let checks: [(&str, bool); 9] = [
        ("model", old.model_id == new.model_id),
        ("endpoint", old.endpoint == new.endpoint),
        ("generation parameters", old.params == new.params),
        ("metric weights", old.weights == new.weights),
        ("rules version", old.rules_version == new.rules_version),
        ("similarity provider", old.similarity_provider == new.similarity_provider),
        ("dataset", old.dataset_fingerprint == new.dataset_fingerprint),
        ("prompt templates", old.templates == new.templates),
        ("decision confidence mode", old.decision_mode == new.decision_mode),
    ];
    match checks.iter().find(|(_, same)| !same) {
        Some((what, _)) => Err(StoreError::ManifestMismatch(what.to_string())),
        None => Ok(()),
    }
}

fn write_all_summaries(store: &RunStore) -> Result<(), CliError> {
    let metrics = store.load_metrics()?;
    if metrics.is_empty() {
        return Ok(());
    }
    let summary = reporting::aggregate(&metrics)?;
    for f in [ExportFormat::Json, ExportFormat::Csv, ExportFormat::Markdown] {
        reporting::write_summary(store.root(), &summary, f)?;
    }
    Ok(())
}

/// Ingests `dataset`, runs every stage into `out` (resuming whatever is
/// already there) and writes the summaries.
pub fn cmd_run(config: &Config, dataset: &Path, out: &Path) -> Result<RunOutcome, CliError> {
    cmd_run_with(config, dataset, out, Arc::new(SystemClock))
}

/// [`cmd_run`] with an explicit clock for stage timestamps.
pub fn cmd_run_with(
    config: &Config,
    dataset: &Path,
    out: &Path,
    clock: Arc<dyn Clock>,
) -> Result<RunOutcome, CliError> {
    config.validate()?;
    let rules = config.load_rules()?;
    let (loaded, load_report) = ingestion::load_dataset(dataset, &config.schema)?;
    for m in &load_report.malformed {
        eprintln!("skipping malformed row {}: {}", m.line, m.reason);
    }
    let (samples, sampling) = match &config.sampling {
        Some(policy) => {
            let (s, r) = ingestion::filter_and_sample(loaded, policy)?;
            (s, Some(r))
        }
        None => (loaded, None),
    };
    let mut inputs = Vec::new();
    for s in &samples {
        inputs.extend(serde_json::to_vec(s).expect("sample serializes"));
        inputs.push(b'\n');
    }

    let store = RunStore::open(out)?;
    let provider = config.similarity.build();
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        model_id: match &config.backend {
            BackendConfig::Http { model_id, .. } | BackendConfig::Scripted { model_id, .. } => {
                model_id.clone()
            }
        },
        endpoint: config.endpoint(),
        params: config.params,
        weights: config.weights,
        rules_version: rules.version().to_string(),
        similarity_provider: provider.provider_id().to_string(),
        dataset_fingerprint: sha256_hex(&inputs),
        seed: config.sampling.as_ref().map_or(0, |p| p.rng_seed),
        sampling: config.sampling.clone(),
        templates: config.templates.clone(),
        decision_mode: config.decision_mode,
        concurrency: config.concurrency,
    };
    if store.manifest_path().exists() {
        check_resumable(&store.read_manifest()?, &manifest)?;
    }
    store.write_manifest(&manifest)?;
    std::fs::write(store.inputs_path(), &inputs).map_err(|source| StoreError::Io {
        path: store.inputs_path().display().to_string(),
        source,
    })?;

    let cache = Arc::new(ScoreCache::open(&store.cache_path())?);
    let pipeline = Pipeline::new(
        config.build_backend()?,
        Similarity::with_cache(provider, cache),
        Arc::new(rules),
        PipelineConfig {
            templates: config.templates.clone(),
            params: config.params,
            weights: config.weights,
            decision_mode: config.decision_mode,
            concurrency: config.concurrency,
        },
    )
    .with_clock(clock);
    let report = pipeline.run_dataset(&samples, &store)?;
    write_all_summaries(&store)?;
    Ok(RunOutcome { sampling, report })
}

/// Recomputes `metrics.jsonl` from persisted traces. Similarities come only
/// from the run's cache, so nothing is fetched over the network.
pub fn cmd_score(run_dir: &Path, weights: Option<&Path>) -> Result<usize, CliError> {
    let store = RunStore::open_existing(run_dir)?;
    let mut manifest = store.read_manifest()?;
    let weights: MetricWeights = match weights {
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|source| StoreError::Io {
                path: p.display().to_string(),
                source,
            })?;
            serde_json::from_str(&raw).map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?
        }
        None => manifest.weights,
    };
    weights
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let samples = ingestion::read_samples(&store.inputs_path())?;
    let finished: std::collections::HashSet<String> =
        store.load_metrics()?.into_iter().map(|m| m.sample_id).collect();
    let samples: Vec<_> = samples.into_iter().filter(|s| finished.contains(&s.id)).collect();

    let cache = Arc::new(ScoreCache::open(&store.cache_path())?);
    let sim = Similarity::with_cache(
        Arc::new(ReplayProvider::new(manifest.similarity_provider.clone())),
        cache,
    );
    let records = rescore_run(
        &samples,
        store.load_stages()?,
        &sim,
        &weights,
        manifest.decision_mode,
    )?;
    store.replace_metrics(&records)?;
    if manifest.weights != weights {
        manifest.weights = weights;
        store.write_manifest(&manifest)?;
    }
    Ok(records.len())
}

/// Writes `summary.<format>` into the run directory.
pub fn cmd_report(run_dir: &Path, format: &str) -> Result<PathBuf, CliError> {
    let format = ExportFormat::parse(format)?;
    let store = RunStore::open_existing(run_dir)?;
    if !store.metrics_path().exists() {
        return Err(StoreError::Missing(store.metrics_path().display().to_string()).into());
    }
    let summary = reporting::aggregate(&store.load_metrics()?)?;
    Ok(reporting::write_summary(store.root(), &summary, format)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetComparison {
    pub dataset: String,
    pub provider_a: String,
    pub provider_b: String,
    pub results: Vec<ProviderDiff>,
}

/// Input/reason and reason/reason pairs from each sample's Justify response,
/// grouped by dataset.
pub fn justify_pair_sets(store: &RunStore) -> Result<BTreeMap<String, Vec<PairSet>>, CliError> {
    let samples = ingestion::read_samples(&store.inputs_path())?;
    let by_id: BTreeMap<&str, _> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut grouped: BTreeMap<String, (Vec<(String, String)>, Vec<(String, String)>)> =
        BTreeMap::new();
    let mut stages = store.load_stages()?;
    stages.retain(|r| r.stage == StageKind::Justify);
    stages.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    for r in stages {
        let Some(sample) = by_id.get(r.sample_id.as_str()) else {
            continue;
        };
        let (input_reason, reason_reason) = grouped.entry(sample.source.clone()).or_default();
        let reasons = &r.parsed.reason_texts;
        for (i, a) in reasons.iter().enumerate() {
            input_reason.push((sample.text.clone(), a.clone()));
            for b in &reasons[i + 1..] {
                reason_reason.push((a.clone(), b.clone()));
            }
        }
    }
    Ok(grouped
        .into_iter()
        .map(|(dataset, (ir, rr))| {
            let sets = [("input-reason", ir), ("reason-reason", rr)]
                .into_iter()
                .filter(|(_, pairs)| !pairs.is_empty())
                .map(|(label, pairs)| PairSet {
                    label: label.to_string(),
                    pairs,
                })
                .collect();
            (dataset, sets)
        })
        .filter(|(_, sets): &(String, Vec<PairSet>)| !sets.is_empty())
        .collect())
}

/// Compares `similarity` against `compare_similarity` on a run's Justify
/// pairs and writes `similarity_comparison.json` into the run directory.
pub fn cmd_compare_sim(config: &Config, run_dir: &Path) -> Result<Vec<DatasetComparison>, CliError> {
    let other = config.compare_similarity.as_ref().ok_or_else(|| {
        CliError::Usage("compare-sim needs `compare_similarity` in the config".into())
    })?;
    let store = RunStore::open_existing(run_dir)?;
    let sets = justify_pair_sets(&store)?;
    if sets.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no Justify reasons to compare on",
            run_dir.display()
        )));
    }
    let a = Similarity::new(config.similarity.build());
    let b = Similarity::new(other.build());
    let mut out = Vec::new();
    for (dataset, pair_sets) in sets {
        out.push(DatasetComparison {
            dataset,
            provider_a: a.provider_id().to_string(),
            provider_b: b.provider_id().to_string(),
            results: compare_providers(&a, &b, &pair_sets)?,
        });
    }
    let mut body = serde_json::to_string_pretty(&out).expect("comparison serializes");
    body.push('\n');
    let path = store.root().join("similarity_comparison.json");
    std::fs::write(&path, body).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(out)
}

fn fatal(e: impl std::fmt::Display) -> u8 {
    eprintln!("error: {e}");
    EXIT_FATAL
}

/// Parses arguments and runs one command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FATAL } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run {
            config,
            dataset,
            out,
        } => {
            let config = match Config::load(&config) {
                Ok(c) => c,
                Err(e) => return fatal(e),
            };
            match cmd_run(&config, &dataset, &out) {
                Ok(outcome) => {
                    if let Some(s) = &outcome.sampling {
                        eprintln!(
                            "ingested {} rows: {} within length, {} within bands, {} sampled",
                            s.input, s.after_length, s.after_band, s.sampled
                        );
                    }
                    let r = &outcome.report;
                    eprintln!(
                        "{} samples: {} completed, {} already complete, {} failed",
                        r.total,
                        r.completed,
                        r.already_complete,
                        r.failed.len()
                    );
                    for f in &r.failed {
                        eprintln!("  {}: {}", f.sample_id, f.error);
                    }
                    if let Some(e) = &r.fatal {
                        eprintln!("error: {e}");
                    }
                    outcome.exit_code()
                }
                Err(e) => fatal(e),
            }
        }
        Command::Score { run, weights } => match cmd_score(&run, weights.as_deref()) {
            Ok(n) => {
                eprintln!("rescored {n} samples");
                EXIT_OK
            }
            Err(e) => fatal(e),
        },
        Command::Report { run, format } => match cmd_report(&run, &format) {
            Ok(path) => {
                eprintln!("wrote {}", path.display());
                EXIT_OK
            }
            Err(e) => fatal(e),
        },
        Command::CompareSim { config, run } => {
            let config = match Config::load(&config) {
                Ok(c) => c,
                Err(e) => return fatal(e),
            };
            match cmd_compare_sim(&config, &run) {
                Ok(rows) => {
                    for row in rows {
                        for d in row.results {
                            println!(
                                "{}\t{}\t{} pairs\tmean |diff| {:.6}",
                                row.dataset, d.label, d.pairs, d.mean_abs_diff
                            );
                        }
                    }
                    EXIT_OK
                }
                Err(e) => fatal(e),
            }
        }
    }
}
