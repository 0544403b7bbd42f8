//! Experiment traces and their serialized reports: per-interval rows,
//! summary statistics, fairness and SLO accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detection::metrics::{
    detection_metrics, diagnosis_metrics, DetectionMetrics, DiagnosisMetrics,
};
use crate::error::{Error, Result};
use crate::federation::HostId;
use crate::simulator::{CompletionRecord, TaskId};
use crate::workload::FaultEvent;

/// One scheduling interval of a run. Everything here is a pure function
/// of (seed, config); wall-clock timings live next to the trace, not in
/// it, so trace files can be compared byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: u64,
    /// Per-host fault labels emitted by the brokers this interval.
    pub labels: Vec<bool>,
    /// Per-host ground truth: an injected fault was active.
    pub truth: Vec<bool>,
    /// Per-host raw fault scores (zeros when remediation is off).
    pub scores: Vec<f64>,
    /// Applied migrations after cross-broker merge.
    pub applied: Vec<(TaskId, HostId)>,
    /// Measured per-host CPU utilization at interval end.
    pub cpu_util: Vec<f64>,
    pub energy_j: f64,
    pub art: f64,
    pub aec: f64,
    pub qos: f64,
    pub o_t: f64,
    /// Fitness of the applied decision, scored with the emitted labels.
    pub fitness: f64,
    pub completed: Vec<CompletionRecord>,
    pub n_migrations: usize,
    pub migration_total_s: f64,
    pub task_restarts: usize,
    pub crashed_hosts: Vec<HostId>,
    pub placement_failures: usize,
    pub active_tasks: usize,
    pub anneal_evaluated: usize,
    pub anneal_skipped: usize,
    /// Mean broker fine-tune loss (0 when remediation is off).
    pub finetune_loss: f64,
    /// Generation ascents that hit a numerical failure and degraded.
    pub degraded_generates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTrace {
    pub mode: String,
    pub seed: u64,
    pub intervals: u64,
    pub n_hosts: usize,
    pub n_leis: usize,
    pub lei_sizes: Vec<usize>,
    pub rows: Vec<TraceRow>,
    /// Injected fault events (the ground-truth generator).
    pub events: Vec<FaultEvent>,
    /// Raw per-interval host feature rows (host-major, feature-minor),
    /// the windows the detectors saw; reusable as training data.
    pub host_rows: Vec<Vec<f64>>,
    /// Wall-clock decision time per interval, milliseconds. Excluded
    /// from determinism comparisons.
    pub decision_time_ms: Vec<f64>,
}

impl ExperimentTrace {
    /// Flattened (host-major) label/truth series for detection metrics.
    pub fn label_series(&self) -> (Vec<bool>, Vec<bool>) {
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for h in 0..self.n_hosts {
            for row in &self.rows {
                pred.push(row.labels[h]);
                truth.push(row.truth[h]);
            }
        }
        (pred, truth)
    }

    pub fn total_energy_j(&self) -> f64 {
        self.rows.iter().map(|r| r.energy_j).sum()
    }

    pub fn completions(&self) -> impl Iterator<Item = &CompletionRecord> {
        self.rows.iter().flat_map(|r| r.completed.iter())
    }

    /// Fraction of completed tasks that blew their spawn-time deadline.
    pub fn slo_violation_rate(&self) -> f64 {
        let mut total = 0usize;
        let mut violated = 0usize;
        for c in self.completions() {
            total += 1;
            if !c.slo_ok {
                violated += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            violated as f64 / total as f64
        }
    }

    /// Flattened (host-major) raw scores, aligned with `label_series`.
    pub fn score_series(&self) -> Vec<f64> {
        let mut scores = Vec::with_capacity(self.n_hosts * self.rows.len());
        for h in 0..self.n_hosts {
            for row in &self.rows {
                scores.push(row.scores[h]);
            }
        }
        scores
    }
}

/// (Sum x)^2 / (n * Sum x^2); 1 when every entity gets the same share,
/// 1/n when one entity gets everything. Degenerate all-zero or empty
/// allocations count as perfectly fair.
pub fn jain_fairness(allocations: &[f64]) -> f64 {
    let n = allocations.len();
    if n == 0 {
        return 1.0;
    }
    let sum: f64 = allocations.iter().sum();
    let sum_sq: f64 = allocations.iter().map(|x| x * x).sum();
    if sum_sq == 0.0 {
        return 1.0;
    }
    sum * sum / (n as f64 * sum_sq)
}

/// Nearest-rank percentile of an unsorted sample; q in (0, 1]. Empty
/// samples report 0.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Per-application 90th-percentile response times from a calibration
/// run, stored as a sidecar file and used as the SLO reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloReference {
    pub per_app_p90_s: BTreeMap<usize, f64>,
}

impl SloReference {
    pub fn from_trace(trace: &ExperimentTrace) -> Self {
        let mut by_app: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for c in trace.completions() {
            by_app.entry(c.profile).or_default().push(c.response_s);
        }
        SloReference {
            per_app_p90_s: by_app
                .into_iter()
                .map(|(app, responses)| (app, percentile(&responses, 0.9)))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(Error::from)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

/// Violation rates against a reference run's per-app 90th percentiles.
/// A response exactly at the reference is a non-violation (strict >).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloReport {
    pub per_app: BTreeMap<usize, f64>,
    pub overall: f64,
    pub violations: usize,
    pub total: usize,
    /// Completions whose app has no reference percentile; counted as
    /// non-violations.
    pub unreferenced: usize,
}

pub fn slo_report(trace: &ExperimentTrace, reference: &SloReference) -> SloReport {
    let mut per_app_counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut violations = 0usize;
    let mut total = 0usize;
    let mut unreferenced = 0usize;
    for c in trace.completions() {
        total += 1;
        match reference.per_app_p90_s.get(&c.profile) {
            Some(&limit) => {
                let entry = per_app_counts.entry(c.profile).or_insert((0, 0));
                entry.1 += 1;
                if c.response_s > limit {
                    entry.0 += 1;
                    violations += 1;
                }
            }
            None => unreferenced += 1,
        }
    }
    SloReport {
        per_app: per_app_counts
            .into_iter()
            .map(|(app, (v, n))| (app, v as f64 / n as f64))
            .collect(),
        overall: if total == 0 { 0.0 } else { violations as f64 / total as f64 },
        violations,
        total,
        unreferenced,
    }
}

/// Wall-clock and process facts: the only summary section that is not a
/// pure function of the trace rows, excluded from byte comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeInfo {
    pub decision_time_mean_ms: f64,
    pub decision_time_max_ms: f64,
    pub peak_rss_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// True when the trace has no rows; every statistic is then zero.
    pub empty: bool,
    pub mode: String,
    pub seed: u64,
    pub intervals: u64,
    pub n_hosts: usize,
    pub completed_tasks: usize,
    pub energy_kwh: f64,
    pub mean_response_s: f64,
    pub p90_response_s: f64,
    pub p99_response_s: f64,
    /// Against the spawn-time deadlines carried in the trace.
    pub slo_violation_rate: f64,
    /// Jain index over each host's mean measured CPU utilization.
    pub cpu_fairness_jain: f64,
    pub migrations: usize,
    pub mean_migration_s: f64,
    pub task_restarts: usize,
    pub host_crashes: usize,
    pub placement_failures: usize,
    pub detection: DetectionMetrics,
    /// Per-host peak scores ranked against ever-faulty hosts; absent
    /// when no fault was injected.
    pub diagnosis: Option<DiagnosisMetrics>,
    pub runtime: RuntimeInfo,
}

/// Every field except `runtime` is a pure function of the trace rows.
pub fn summarize(trace: &ExperimentTrace) -> Result<Summary> {
    let responses: Vec<f64> = trace.completions().map(|c| c.response_s).collect();
    let migrations: usize = trace.rows.iter().map(|r| r.n_migrations).sum();
    let migration_s: f64 = trace.rows.iter().map(|r| r.migration_total_s).sum();
    let per_host_cpu: Vec<f64> = (0..trace.n_hosts)
        .map(|h| {
            if trace.rows.is_empty() {
                0.0
            } else {
                trace.rows.iter().map(|r| r.cpu_util[h]).sum::<f64>() / trace.rows.len() as f64
            }
        })
        .collect();

    let (pred, truth) = trace.label_series();
    let scores = trace.score_series();
    let detection = if truth.is_empty() {
        DetectionMetrics {
            accuracy: 0.0,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            auroc: 0.0,
            precision_defined: false,
        }
    } else {
        detection_metrics(&scores, &pred, &truth)?
    };

    let faulty: BTreeSet<usize> = (0..trace.n_hosts)
        .filter(|&h| trace.rows.iter().any(|r| r.truth[h]))
        .collect();
    let diagnosis = if faulty.is_empty() {
        None
    } else {
        let peak: Vec<f64> = (0..trace.n_hosts)
            .map(|h| trace.rows.iter().map(|r| r.scores[h]).fold(0.0, f64::max))
            .collect();
        Some(diagnosis_metrics(&peak, &faulty)?)
    };

    let times = &trace.decision_time_ms;
    let runtime = RuntimeInfo {
        decision_time_mean_ms: if times.is_empty() {
            0.0
        } else {
            times.iter().sum::<f64>() / times.len() as f64
        },
        decision_time_max_ms: times.iter().copied().fold(0.0, f64::max),
        peak_rss_mb: peak_rss_mb(),
    };

    Ok(Summary {
        empty: trace.rows.is_empty(),
        mode: trace.mode.clone(),
        seed: trace.seed,
        intervals: trace.intervals,
        n_hosts: trace.n_hosts,
        completed_tasks: responses.len(),
        energy_kwh: trace.total_energy_j() / 3.6e6,
        mean_response_s: if responses.is_empty() {
            0.0
        } else {
            responses.iter().sum::<f64>() / responses.len() as f64
        },
        p90_response_s: percentile(&responses, 0.9),
        p99_response_s: percentile(&responses, 0.99),
        slo_violation_rate: trace.slo_violation_rate(),
        cpu_fairness_jain: jain_fairness(&per_host_cpu),
        migrations,
        mean_migration_s: if migrations == 0 { 0.0 } else { migration_s / migrations as f64 },
        task_restarts: trace.rows.iter().map(|r| r.task_restarts).sum(),
        host_crashes: trace.rows.iter().map(|r| r.crashed_hosts.len()).sum(),
        placement_failures: trace.rows.iter().map(|r| r.placement_failures).sum(),
        detection,
        diagnosis,
        runtime,
    })
}

/// Peak resident set of this process in MB; 0 when unavailable.
fn peak_rss_mb() -> f64 {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else { return 0.0 };
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            if let Some(kb) = rest.trim().strip_suffix(" kB").and_then(|v| v.parse::<f64>().ok())
            {
                return kb / 1024.0;
            }
        }
    }
    0.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub trace_json: PathBuf,
    pub trace_csv: PathBuf,
    pub series_csv: PathBuf,
    pub summary_json: PathBuf,
}

/// Serializes the full trace (JSON, round-trips through `load_trace`),
/// a per-interval CSV, a per-host long-format series CSV, and the
/// summary. The two CSVs are byte-identical across same-seed runs.
pub fn write_report(trace: &ExperimentTrace, out_dir: &Path) -> Result<ReportPaths> {
    std::fs::create_dir_all(out_dir)?;
    let paths = ReportPaths {
        trace_json: out_dir.join("trace.json"),
        trace_csv: out_dir.join("trace.csv"),
        series_csv: out_dir.join("series.csv"),
        summary_json: out_dir.join("summary.json"),
    };

    std::fs::write(&paths.trace_json, serde_json::to_string_pretty(trace)?)?;

    let mut csv = String::from(
        "t,labels,truth,max_score,applied,energy_j,art,aec,qos,o_t,fitness,completed,violations,\
         migrations,migration_total_s,task_restarts,crashed_hosts,placement_failures,\
         active_tasks,anneal_evaluated,anneal_skipped,finetune_loss,degraded_generates\n",
    );
    for r in &trace.rows {
        let violations = r.completed.iter().filter(|c| !c.slo_ok).count();
        let max_score = r.scores.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.labels.iter().filter(|&&b| b).count(),
            r.truth.iter().filter(|&&b| b).count(),
            max_score,
            r.applied.len(),
            r.energy_j,
            r.art,
            r.aec,
            r.qos,
            r.o_t,
            r.fitness,
            r.completed.len(),
            violations,
            r.n_migrations,
            r.migration_total_s,
            r.task_restarts,
            r.crashed_hosts.len(),
            r.placement_failures,
            r.active_tasks,
            r.anneal_evaluated,
            r.anneal_skipped,
            r.finetune_loss,
            r.degraded_generates,
        );
    }
    std::fs::write(&paths.trace_csv, csv)?;

    let mut series = String::from("t,host,label,truth,score,cpu_util\n");
    for r in &trace.rows {
        for h in 0..trace.n_hosts {
            let _ = writeln!(
                series,
                "{},{},{},{},{},{}",
                r.t,
                h,
                u8::from(r.labels[h]),
                u8::from(r.truth[h]),
                r.scores[h],
                r.cpu_util[h],
            );
        }
    }
    std::fs::write(&paths.series_csv, series)?;

    let summary = summarize(trace)?;
    std::fs::write(&paths.summary_json, serde_json::to_string_pretty(&summary)?)?;
    Ok(paths)
}

pub fn load_trace(path: &Path) -> Result<ExperimentTrace> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_trace(seed: u64) -> ExperimentTrace {
        // Two hosts, three intervals, one fault on host 1 over t in [1, 2].
        let mk_row = |t: u64, truth1: bool, completed: Vec<CompletionRecord>| TraceRow {
            t,
            labels: vec![false, truth1],
            truth: vec![false, truth1],
            scores: vec![0.1, if truth1 { 0.9 } else { 0.2 }],
            applied: vec![],
            cpu_util: vec![0.4, 0.6],
            energy_j: 1800.0,
            art: 0.3,
            aec: 0.5,
            qos: 0.4,
            o_t: 0.0,
            fitness: 0.4,
            completed,
            n_migrations: 0,
            migration_total_s: 0.0,
            task_restarts: 0,
            crashed_hosts: vec![],
            placement_failures: 0,
            active_tasks: 2,
            anneal_evaluated: 0,
            anneal_skipped: 0,
            finetune_loss: 0.0,
            degraded_generates: 0,
        };
        let done = |task: u64, profile: usize, response_s: f64, slo_ok: bool| CompletionRecord {
            task,
            profile,
            response_s,
            slo_ok,
        };
        ExperimentTrace {
            mode: "none".into(),
            seed,
            intervals: 3,
            n_hosts: 2,
            n_leis: 1,
            lei_sizes: vec![2],
            rows: vec![
                mk_row(0, false, vec![done(0, 0, 100.0, true)]),
                mk_row(1, true, vec![done(1, 0, 300.0, true), done(2, 1, 500.0, false)]),
                mk_row(2, true, vec![]),
            ],
            events: vec![],
            host_rows: vec![vec![0.0; 4]; 3],
            decision_time_ms: vec![0.5, 0.6, 0.4],
        }
    }

    #[test]
    fn jain_matches_hand_values() {
        assert_abs_diff_eq!(jain_fairness(&[2.0, 2.0, 2.0]), 1.0);
        assert_abs_diff_eq!(jain_fairness(&[1.0, 0.0, 0.0, 0.0]), 0.25);
        assert_abs_diff_eq!(jain_fairness(&[1.0, 2.0, 3.0]), 36.0 / 42.0);
        assert_abs_diff_eq!(jain_fairness(&[]), 1.0);
        assert_abs_diff_eq!(jain_fairness(&[0.0, 0.0]), 1.0);
    }

    #[test]
    fn percentile_nearest_rank() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_abs_diff_eq!(percentile(&xs, 0.9), 9.0);
        assert_abs_diff_eq!(percentile(&xs, 1.0), 10.0);
        assert_abs_diff_eq!(percentile(&xs, 0.05), 1.0);
        assert_abs_diff_eq!(percentile(&[], 0.9), 0.0);
    }

    #[test]
    fn slo_reference_is_strict_greater() {
        let trace = toy_trace(1);
        let reference = SloReference::from_trace(&trace);
        // Profile 0 responses: 100, 300 -> p90 = 300; profile 1: 500.
        assert_abs_diff_eq!(reference.per_app_p90_s[&0], 300.0);
        let report = slo_report(&trace, &reference);
        // The 300-second completion sits exactly at the reference: no
        // violation under the strict rule.
        assert_eq!(report.violations, 0);
        assert_abs_diff_eq!(report.overall, 0.0);

        let mut tight = reference.clone();
        tight.per_app_p90_s.insert(0, 99.0);
        let report = slo_report(&trace, &tight);
        assert_eq!(report.violations, 2);
        assert_abs_diff_eq!(report.per_app[&0], 1.0);
    }

    #[test]
    fn slo_report_counts_hand_fixture() {
        let mut trace = toy_trace(2);
        // 10 violations out of 100 completions, all profile 0.
        trace.rows[0].completed = (0..100)
            .map(|i| CompletionRecord {
                task: i,
                profile: 0,
                response_s: if i < 10 { 200.0 } else { 50.0 },
                slo_ok: true,
            })
            .collect();
        trace.rows[1].completed.clear();
        let reference =
            SloReference { per_app_p90_s: [(0usize, 100.0)].into_iter().collect() };
        let report = slo_report(&trace, &reference);
        assert_eq!(report.total, 100);
        assert_eq!(report.violations, 10);
        assert_abs_diff_eq!(report.overall, 0.10);
    }

    #[test]
    fn summary_is_pure_and_roundtrips() {
        let trace = toy_trace(7);
        let dir = std::env::temp_dir().join("dragon-report-tests/roundtrip");
        let paths = write_report(&trace, &dir).unwrap();
        let back = load_trace(&paths.trace_json).unwrap();
        assert_eq!(back, trace);

        let a = serde_json::to_value(summarize(&trace).unwrap()).unwrap();
        let b = serde_json::to_value(summarize(&back).unwrap()).unwrap();
        let strip = |mut v: serde_json::Value| {
            v.as_object_mut().unwrap().remove("runtime");
            v
        };
        assert_eq!(strip(a), strip(b), "metrics reproduce bit-exactly after reload");
    }

    #[test]
    fn same_trace_writes_identical_csv_bytes() {
        let trace = toy_trace(9);
        let dir_a = std::env::temp_dir().join("dragon-report-tests/bytes-a");
        let dir_b = std::env::temp_dir().join("dragon-report-tests/bytes-b");
        let pa = write_report(&trace, &dir_a).unwrap();
        let pb = write_report(&trace, &dir_b).unwrap();
        assert_eq!(
            std::fs::read(&pa.trace_csv).unwrap(),
            std::fs::read(&pb.trace_csv).unwrap()
        );
        assert_eq!(
            std::fs::read(&pa.series_csv).unwrap(),
            std::fs::read(&pb.series_csv).unwrap()
        );
    }

    #[test]
    fn empty_trace_summary_is_flagged_zeros() {
        let trace = ExperimentTrace {
            mode: "none".into(),
            seed: 0,
            intervals: 0,
            n_hosts: 2,
            n_leis: 1,
            lei_sizes: vec![2],
            rows: vec![],
            events: vec![],
            host_rows: vec![],
            decision_time_ms: vec![],
        };
        let s = summarize(&trace).unwrap();
        assert!(s.empty);
        assert_eq!(s.completed_tasks, 0);
        assert_abs_diff_eq!(s.energy_kwh, 0.0);
        assert_abs_diff_eq!(s.mean_response_s, 0.0);
        assert!(s.diagnosis.is_none());
    }

    #[test]
    fn summary_detection_block_matches_series_metrics() {
        let trace = toy_trace(4);
        let s = summarize(&trace).unwrap();
        let (pred, truth) = trace.label_series();
        let scores = trace.score_series();
        let direct = detection_metrics(&scores, &pred, &truth).unwrap();
        assert_eq!(s.detection, direct);
        assert_abs_diff_eq!(s.detection.f1, 1.0);
        let diag = s.diagnosis.unwrap();
        assert_abs_diff_eq!(diag.hitrate_100, 1.0);
    }
}
