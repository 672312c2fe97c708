//! Per-dataset, per-model summaries of a run and their JSON, CSV and
//! markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Absence, DecisionKind, Metric, MetricRecord, StanceProbe, Stance};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("run has no metric records")]
    EmptyRun,
    #[error("unknown format {0:?} (expected json, csv or md)")]
    UnknownFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Share of samples below which a metric mean is flagged as thinly supported.
pub const LOW_SUPPORT_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub higher_is_better: bool,
    pub mean: Option<f64>,
    pub count: usize,
    pub total: usize,
    pub absences: BTreeMap<Absence, usize>,
    pub low_support: bool,
}

/// A count out of a total, with its percentage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub count: usize,
    pub total: usize,
    pub percent: Option<f64>,
}

impl Rate {
    fn new(count: usize, total: usize) -> Self {
        Self {
            count,
            total,
            percent: (total > 0).then(|| 100.0 * count as f64 / total as f64),
        }
    }
}

/// Mean decision-confidence and informativeness terms over valid probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub probes: usize,
    pub decision_confidence: Option<f64>,
    pub informativeness: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceBin {
    Low,
    Medium,
    High,
}

impl ConfidenceBin {
    fn label(&self) -> &'static str {
        match self {
            ConfidenceBin::Low => "low",
            ConfidenceBin::Medium => "medium",
            ConfidenceBin::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StanceBinRow {
    pub stance: Stance,
    pub bin: ConfidenceBin,
    pub samples: usize,
    pub sos_mean: Option<f64>,
    pub sos_count: usize,
    pub dis_mean: Option<f64>,
    pub dis_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StanceBreakdown {
    /// All stance confidences were equal, so every sample landed in one bin.
    pub degenerate: bool,
    pub rows: Vec<StanceBinRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub source: String,
    pub model_id: String,
    pub samples: usize,
    pub metrics: Vec<MetricSummary>,
    pub sufficient_internal: Rate,
    pub sufficient_external: Rate,
    pub nonsensical: BTreeMap<String, Rate>,
    pub rs_factors: FactorSummary,
    pub rn_factors: FactorSummary,
    pub stances: BTreeMap<Stance, usize>,
    pub stance_breakdown: StanceBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub groups: Vec<GroupSummary>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Tertile bin of every value: `floor(3 * rank / n)`, where tied values share
/// the lowest rank among them.
pub fn tertile_bins(values: &[f64]) -> Vec<ConfidenceBin> {
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    values
        .iter()
        .map(|v| {
            let rank = sorted.partition_point(|x| x.total_cmp(v).is_lt());
            match 3 * rank / n {
                0 => ConfidenceBin::Low,
                1 => ConfidenceBin::Medium,
                _ => ConfidenceBin::High,
            }
        })
        .collect()
}

/// SoS and DiS means per stance and within-group confidence tertile. Only
/// combinations that occur are listed.
pub fn stance_breakdown(records: &[&MetricRecord]) -> StanceBreakdown {
    let scored: Vec<(&MetricRecord, f64)> = records
        .iter()
        .filter_map(|r| r.stance_confidence.map(|c| (*r, c)))
        .collect();
    let confidences: Vec<f64> = scored.iter().map(|(_, c)| *c).collect();
    let bins = tertile_bins(&confidences);
    let degenerate = confidences.windows(2).all(|w| w[0] == w[1]);
    let mut cells: BTreeMap<(Stance, ConfidenceBin), Vec<&MetricRecord>> = BTreeMap::new();
    for ((r, _), bin) in scored.iter().zip(bins) {
        cells.entry((r.stance, bin)).or_default().push(r);
    }
    let rows = cells
        .into_iter()
        .map(|((stance, bin), rs)| {
            let sos: Vec<f64> = rs.iter().filter_map(|r| r.sos).collect();
            let dis: Vec<f64> = rs.iter().filter_map(|r| r.dis).collect();
            StanceBinRow {
                stance,
                bin,
                samples: rs.len(),
                sos_mean: mean(&sos),
                sos_count: sos.len(),
                dis_mean: mean(&dis),
                dis_count: dis.len(),
            }
        })
        .collect();
    StanceBreakdown { degenerate, rows }
}

fn factor_summary<'a>(probes: impl Iterator<Item = &'a StanceProbe>) -> FactorSummary {
    let factors: Vec<_> = probes.filter_map(|p| p.factors).collect();
    FactorSummary {
        probes: factors.len(),
        decision_confidence: mean(&factors.iter().map(|f| f.decision_confidence).collect::<Vec<_>>()),
        informativeness: mean(&factors.iter().map(|f| f.informativeness).collect::<Vec<_>>()),
    }
}

fn decision_rate(decisions: &[DecisionKind], kind: DecisionKind) -> Rate {
    Rate::new(decisions.iter().filter(|d| **d == kind).count(), decisions.len())
}

fn summarize_group(source: &str, model_id: &str, records: &[&MetricRecord]) -> GroupSummary {
    let total = records.len();
    let metrics = Metric::ALL
        .iter()
        .map(|&m| {
            let values: Vec<f64> = records.iter().filter_map(|r| r.value(m)).collect();
            let mut absences = BTreeMap::new();
            for r in records {
                if let Some(a) = r.absences.get(&m) {
                    *absences.entry(*a).or_insert(0) += 1;
                }
            }
            MetricSummary {
                metric: m,
                higher_is_better: m.higher_is_better(),
                mean: mean(&values),
                count: values.len(),
                total,
                absences,
                low_support: (values.len() as f64) < LOW_SUPPORT_FRACTION * total as f64,
            }
        })
        .collect();

    let internal: Vec<DecisionKind> = records.iter().filter_map(|r| r.internal_decision).collect();
    let external: Vec<DecisionKind> = records.iter().filter_map(|r| r.external_decision).collect();
    let suf: Vec<DecisionKind> = records
        .iter()
        .flat_map(|r| r.rs_probes.iter().map(|p| p.decision_kind))
        .collect();
    let nec: Vec<DecisionKind> = records
        .iter()
        .flat_map(|r| r.rn_probes.iter().map(|p| p.decision_kind))
        .collect();
    let nonsensical = [
        ("int", &internal),
        ("ext", &external),
        ("suf", &suf),
        ("nec", &nec),
    ]
    .into_iter()
    .map(|(k, d)| (k.to_string(), decision_rate(d, DecisionKind::Nonsensical)))
    .collect();

    let mut stances = BTreeMap::new();
    for r in records {
        *stances.entry(r.stance).or_insert(0) += 1;
    }

    GroupSummary {
        source: source.to_string(),
        model_id: model_id.to_string(),
        samples: total,
        metrics,
        sufficient_internal: decision_rate(&internal, DecisionKind::Sufficient),
        sufficient_external: decision_rate(&external, DecisionKind::Sufficient),
        nonsensical,
        rs_factors: factor_summary(records.iter().flat_map(|r| r.rs_probes.iter())),
        rn_factors: factor_summary(records.iter().flat_map(|r| r.rn_probes.iter())),
        stances,
        stance_breakdown: stance_breakdown(records),
    }
}

/// Summarizes metric records per (dataset, model). Means are unweighted over
/// the samples where a metric is present.
pub fn aggregate(records: &[MetricRecord]) -> Result<RunSummary, ReportError> {
    if records.is_empty() {
        return Err(ReportError::EmptyRun);
    }
    let mut groups: BTreeMap<(String, String), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.source.clone(), r.model_id.clone()))
            .or_default()
            .push(r);
    }
    Ok(RunSummary {
        groups: groups
            .into_iter()
            .map(|((source, model), mut rs)| {
                // Order-independent floating point sums.
                rs.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
                summarize_group(&source, &model, &rs)
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Csv,
    Markdown,
}

impl ExportFormat {
    pub fn parse(s: &str) -> Result<Self, ReportError> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            Self::Json => "json",
            Self::Csv => "csv",
            Self::Markdown => "md",
        }
    }
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

fn render_csv(summary: &RunSummary) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "model",
        "metric",
        "direction",
        "mean",
        "count",
        "total",
        "low_support",
        "absences",
    ])?;
    for g in &summary.groups {
        for m in &g.metrics {
            let absences = m
                .absences
                .iter()
                .map(|(a, n)| format!("{a}={n}"))
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                g.source.as_str(),
                g.model_id.as_str(),
                m.metric.label(),
                if m.higher_is_better { "higher" } else { "lower" },
                &m.mean.map_or_else(String::new, |v| v.to_string()),
                &m.count.to_string(),
                &m.total.to_string(),
                &m.low_support.to_string(),
                &absences,
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Io {
        path: "csv buffer".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn render_markdown(summary: &RunSummary) -> String {
    let mut s = String::new();
    s.push_str("## Metrics\n\n| Dataset | Model |");
    for m in Metric::ALL {
        let arrow = if m.higher_is_better() { "↑" } else { "↓" };
        let _ = write!(s, " {} {arrow} |", m.label());
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---:|".repeat(Metric::ALL.len()));
    s.push('\n');
    for g in &summary.groups {
        let _ = write!(s, "| {} | {} |", g.source, g.model_id);
        for m in &g.metrics {
            let flag = if m.low_support && m.count > 0 { "*" } else { "" };
            let _ = write!(s, " {}{flag} (n={}) |", fmt_opt(m.mean, 3), m.count);
        }
        s.push('\n');
    }
    s.push_str("\n`*` marks means over fewer than 10% of samples.\n");

    s.push_str("\n## Absences\n\n| Dataset | Model | Metric | Present | Absent by reason |\n|---|---|---|---:|---|\n");
    for g in &summary.groups {
        for m in &g.metrics {
            let reasons = m
                .absences
                .iter()
                .map(|(a, n)| format!("{a}: {n}"))
                .collect::<Vec<_>>()
                .join(", ");
            let _ = writeln!(
                s,
                "| {} | {} | {} | {}/{} | {} |",
                g.source,
                g.model_id,
                m.metric.label(),
                m.count,
                m.total,
                reasons
            );
        }
    }

    s.push_str("\n## Uphold decisions\n\n| Dataset | Model | % sufficient INT | % sufficient EXT | % nonsensical INT | EXT | SUF | NEC |\n|---|---|---:|---:|---:|---:|---:|---:|\n");
    for g in &summary.groups {
        let pct = |r: &Rate| format!("{} ({}/{})", fmt_opt(r.percent, 1), r.count, r.total);
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            g.source,
            g.model_id,
            pct(&g.sufficient_internal),
            pct(&g.sufficient_external),
            pct(&g.nonsensical["int"]),
            pct(&g.nonsensical["ext"]),
            pct(&g.nonsensical["suf"]),
            pct(&g.nonsensical["nec"]),
        );
    }

    s.push_str("\n## RS / RN factors\n\n| Dataset | Model | RS C(Y) | RS I_S | RS probes | RN C(Y) | RN I_N | RN probes |\n|---|---|---:|---:|---:|---:|---:|---:|\n");
    for g in &summary.groups {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            g.source,
            g.model_id,
            fmt_opt(g.rs_factors.decision_confidence, 3),
            fmt_opt(g.rs_factors.informativeness, 3),
            g.rs_factors.probes,
            fmt_opt(g.rn_factors.decision_confidence, 3),
            fmt_opt(g.rn_factors.informativeness, 3),
            g.rn_factors.probes,
        );
    }

    s.push_str("\n## Stance and confidence\n");
    for g in &summary.groups {
        let dist = g
            .stances
            .iter()
            .map(|(st, n)| format!("{st}: {n}"))
            .collect::<Vec<_>>()
            .join(", ");
        let _ = write!(s, "\n{} / {}: {dist}", g.source, g.model_id);
        if g.stance_breakdown.degenerate {
            s.push_str(" (all stance confidences equal; single bin)");
        }
        s.push_str("\n\n| Stance | Confidence | Samples | SoS | DiS |\n|---|---|---:|---:|---:|\n");
        for r in &g.stance_breakdown.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} (n={}) | {} (n={}) |",
                r.stance,
                r.bin.label(),
                r.samples,
                fmt_opt(r.sos_mean, 3),
                r.sos_count,
                fmt_opt(r.dis_mean, 3),
                r.dis_count
            );
        }
    }
    s
}

/// Renders a summary; the same summary always renders to the same bytes.
pub fn export(summary: &RunSummary, format: ExportFormat) -> Result<String, ReportError> {
    Ok(match format {
        ExportFormat::Json => {
            let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
            s.push('\n');
            s
        }
        ExportFormat::Csv => render_csv(summary)?,
        ExportFormat::Markdown => render_markdown(summary),
    })
}

/// Writes `summary.<ext>` into `dir`.
pub fn write_summary(
    dir: &Path,
    summary: &RunSummary,
    format: ExportFormat,
) -> Result<PathBuf, ReportError> {
    let path = dir.join(format!("summary.{}", format.extension()));
    std::fs::write(&path, export(summary, format)?).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProbeFactors;

    fn rec(id: &str, stance: Stance, conf: f64, sos: Option<f64>) -> MetricRecord {
        let mut absences = BTreeMap::new();
        for m in Metric::ALL {
            if m != Metric::Sos || sos.is_none() {
                absences.insert(m, Absence::NoReasons);
            }
        }
        MetricRecord {
            sample_id: id.into(),
            source: "d".into(),
            model_id: "m".into(),
            stance,
            stance_confidence: Some(conf),
            justify_reasons: 1,
            sos,
            dis: None,
            uii: None,
            uei: None,
            rs: None,
            rn: None,
            internal_decision: None,
            external_decision: None,
            rs_probes: vec![],
            rn_probes: vec![],
            absences,
        }
    }

    #[test]
    fn mean_and_count() {
        let s = aggregate(&[
            rec("a", Stance::Toxic, 0.1, Some(0.4)),
            rec("b", Stance::Toxic, 0.2, Some(0.6)),
        ])
        .unwrap();
        let sos = &s.groups[0].metrics[0];
        assert!((sos.mean.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(sos.count, 2);
        assert!(!sos.low_support);
    }

    #[test]
    fn low_support_flag() {
        let mut rs: Vec<MetricRecord> = (0..20)
            .map(|i| rec(&format!("s{i:02}"), Stance::Toxic, 0.5, Some(0.5)))
            .collect();
        rs[3].uii = Some(0.3);
        rs[3].absences.remove(&Metric::Uii);
        let s = aggregate(&rs).unwrap();
        let uii = &s.groups[0].metrics[2];
        assert_eq!(uii.count, 1);
        assert!(uii.low_support);
        assert_eq!(uii.absences[&Absence::NoReasons], 19);
    }

    #[test]
    fn empty_run_is_an_error() {
        assert!(matches!(aggregate(&[]), Err(ReportError::EmptyRun)));
    }

    #[test]
    fn tertiles() {
        assert_eq!(
            tertile_bins(&[0.9, 0.1, 0.5]),
            vec![ConfidenceBin::High, ConfidenceBin::Low, ConfidenceBin::Medium]
        );
        assert!(tertile_bins(&[0.3; 5]).iter().all(|b| *b == ConfidenceBin::Low));
    }

    #[test]
    fn breakdown_degenerate_and_sparse() {
        let rs = [
            rec("a", Stance::Toxic, 0.4, Some(0.2)),
            rec("b", Stance::Toxic, 0.4, Some(0.4)),
        ];
        let refs: Vec<&MetricRecord> = rs.iter().collect();
        let b = stance_breakdown(&refs);
        assert!(b.degenerate);
        assert_eq!(b.rows.len(), 1);
        assert!(b.rows.iter().all(|r| r.stance == Stance::Toxic));
        assert!((b.rows[0].sos_mean.unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn factors_and_rates() {
        let mut r = rec("a", Stance::Toxic, 0.5, Some(0.5));
        r.internal_decision = Some(DecisionKind::Sufficient);
        r.external_decision = Some(DecisionKind::Nonsensical);
        r.rs_probes = vec![
            StanceProbe {
                reason_index: 0,
                decision_kind: DecisionKind::Sufficient,
                new_reasons: 0,
                factors: Some(ProbeFactors {
                    weight: 1.0,
                    decision_confidence: 0.8,
                    informativeness: 0.0,
                    value: 0.8,
                }),
            },
            StanceProbe {
                reason_index: 1,
                decision_kind: DecisionKind::Nonsensical,
                new_reasons: 0,
                factors: None,
            },
        ];
        let s = aggregate(&[r]).unwrap();
        let g = &s.groups[0];
        assert_eq!(g.sufficient_internal.percent, Some(100.0));
        assert_eq!(g.sufficient_external.percent, Some(0.0));
        assert_eq!(g.nonsensical["suf"].percent, Some(50.0));
        assert_eq!(g.nonsensical["nec"].percent, None);
        assert_eq!(g.rs_factors.probes, 1);
        assert_eq!(g.rs_factors.decision_confidence, Some(0.8));
    }

    #[test]
    fn formats() {
        let s = aggregate(&[rec("a", Stance::Toxic, 0.5, Some(0.5))]).unwrap();
        let csv = export(&s, ExportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 1 + 6);
        assert!(csv.lines().nth(1).unwrap().starts_with("d,m,SoS,higher,0.5,1,1,false"));
        let md = export(&s, ExportFormat::Markdown).unwrap();
        assert!(md.contains("| d | m | 0.500 (n=1) |"));
        assert!(md.contains("UII ↓"));
        assert_eq!(export(&s, ExportFormat::Json).unwrap(), export(&s, ExportFormat::Json).unwrap());
        assert!(matches!(ExportFormat::parse("xml"), Err(ReportError::UnknownFormat(_))));
    }
}
