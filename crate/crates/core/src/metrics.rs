//! Success rate, latency breakdown, run summaries and cross-policy tables.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::aggregator::{CycleRecord, Policy, RunOutcome};
use crate::kinematics::NodeId;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no cycle with a non-empty expected set")]
    EmptyRun,
    #[error("reports do not match: {0}")]
    Mismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// What a cycle's success count is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DssrDenominator {
    /// Nodes the aggregator was waiting for.
    #[default]
    Expected,
    /// Updates that ended up in the segment.
    Received,
}

/// Success percentage, or `None` when nothing was expected.
pub fn dssr(correct: usize, expected: usize) -> Option<f64> {
    (expected > 0).then(|| 100.0 * correct.min(expected) as f64 / expected as f64)
}

/// Success percentage from a segment's contents: only `cycle`'s own updates
/// from expected nodes count.
pub fn dssr_of_segment(segment: &[(NodeId, u64)], expected: &BTreeSet<NodeId>, cycle: u64) -> Option<f64> {
    let correct: BTreeSet<NodeId> = segment
        .iter()
        .filter(|(n, k)| *k == cycle && expected.contains(n))
        .map(|&(n, _)| n)
        .collect();
    dssr(correct.len(), expected.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub sequencing_ms: f64,
    pub connection_ms: f64,
    pub prediction_ms: f64,
    pub total_ms: f64,
}

/// Splits one cycle's latency; the forecast cost is spread over `period` cycles.
pub fn cycle_latency(
    wait_ms: f64,
    decision_cost_ms: f64,
    l_pred_ms: f64,
    period: usize,
) -> Result<LatencyBreakdown, MetricsError> {
    if !(wait_ms >= 0.0 && decision_cost_ms >= 0.0 && l_pred_ms >= 0.0) || period == 0 {
        return Err(MetricsError::InvalidInput(
            "latency inputs must be >= 0 and period >= 1".into(),
        ));
    }
    let prediction_ms = l_pred_ms / period as f64;
    Ok(LatencyBreakdown {
        sequencing_ms: wait_ms,
        connection_ms: decision_cost_ms,
        prediction_ms,
        total_ms: wait_ms + decision_cost_ms + prediction_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: u64,
    pub ego_speed_mps: f64,
    pub expected: usize,
    pub correct: usize,
    pub dssr_pct: Option<f64>,
    pub latency_ms: f64,
    pub sequencing_ms: f64,
    pub connection_ms: f64,
    pub prediction_ms: f64,
    pub max_aoi_ms: f64,
}

impl CycleMetrics {
    pub fn from_record(r: &CycleRecord, denominator: DssrDenominator) -> Self {
        let b = LatencyBreakdown {
            sequencing_ms: r.sequencing_ms,
            connection_ms: r.connection_ms,
            prediction_ms: r.prediction_ms,
            total_ms: r.sequencing_ms + r.connection_ms + r.prediction_ms,
        };
        let base = match denominator {
            DssrDenominator::Expected => r.expected.len(),
            DssrDenominator::Received => r.placed.len(),
        };
        Self {
            cycle: r.cycle,
            ego_speed_mps: r.ego_speed,
            expected: r.expected.len(),
            correct: r.correct.len(),
            dssr_pct: if r.expected.is_empty() {
                None
            } else {
                dssr(r.correct.len(), base)
            },
            latency_ms: b.total_ms,
            sequencing_ms: b.sequencing_ms,
            connection_ms: b.connection_ms,
            prediction_ms: b.prediction_ms,
            max_aoi_ms: r.max_aoi_observed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: String,
    pub seed: u64,
    /// Identifies the scenario so reports from different setups are not mixed.
    pub scenario: String,
    pub cycles: Vec<CycleMetrics>,
    pub mean_dssr: f64,
    pub mean_latency: f64,
    pub mean_sequencing: f64,
    pub mean_connection: f64,
    pub mean_prediction: f64,
    pub sequencing_share: f64,
    pub aoi_satisfaction: f64,
    pub prediction_invocations: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Means over the run. DSSR only averages cycles that expected someone.
pub fn aggregate_report(cycles: Vec<CycleMetrics>, policy: &str, seed: u64) -> Result<RunReport, MetricsError> {
    let mean_dssr = mean(cycles.iter().filter_map(|c| c.dssr_pct)).ok_or(MetricsError::EmptyRun)?;
    let avg = |f: fn(&CycleMetrics) -> f64| mean(cycles.iter().map(f)).unwrap_or(0.0);
    let mean_latency = avg(|c| c.latency_ms);
    let mean_sequencing = avg(|c| c.sequencing_ms);
    Ok(RunReport {
        policy: policy.to_string(),
        seed,
        scenario: String::new(),
        mean_dssr,
        mean_latency,
        mean_sequencing,
        mean_connection: avg(|c| c.connection_ms),
        mean_prediction: avg(|c| c.prediction_ms),
        sequencing_share: if mean_latency > 0.0 {
            mean_sequencing / mean_latency
        } else {
            0.0
        },
        aoi_satisfaction: 0.0,
        prediction_invocations: 0,
        cycles,
    })
}

/// Full report for one policy run, with AoI satisfaction over every update
/// the aggregator received.
pub fn report_from_outcome(
    outcome: &RunOutcome,
    received_aoi: &[f64],
    threshold_ms: f64,
    seed: u64,
    scenario: &str,
    denominator: DssrDenominator,
) -> Result<RunReport, MetricsError> {
    let cycles = outcome
        .cycles
        .iter()
        .map(|r| CycleMetrics::from_record(r, denominator))
        .collect();
    let mut report = aggregate_report(cycles, outcome.policy.as_str(), seed)?;
    report.scenario = scenario.to_string();
    report.prediction_invocations = outcome.prediction_invocations;
    report.aoi_satisfaction = if received_aoi.is_empty() {
        0.0
    } else {
        100.0 * received_aoi.iter().filter(|&&a| a <= threshold_ms).count() as f64 / received_aoi.len() as f64
    };
    Ok(report)
}

/// Speed bucket in 5 m/s steps.
pub fn speed_bucket(speed_mps: f64) -> u32 {
    ((speed_mps.abs() / 5.0).round() * 5.0) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub speed_bucket_mps: u32,
    pub policy: String,
    pub runs: usize,
    pub mean_dssr: Option<f64>,
    pub mean_latency: f64,
    pub mean_sequencing: f64,
    /// Reference minus this policy, in percentage points.
    pub delta_dssr_pp: Option<f64>,
    /// Reference minus this policy, in ms.
    pub delta_latency_ms: f64,
    /// How much lower the reference latency is, relative to this policy.
    pub latency_reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub reference: String,
    pub scenario: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, bucket: u32, policy: &str) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.speed_bucket_mps == bucket && r.policy == policy)
    }

    pub fn buckets(&self) -> Vec<u32> {
        self.rows
            .iter()
            .map(|r| r.speed_bucket_mps)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// `(dssr, latency)` of `a` minus `b` within one bucket.
    pub fn delta(&self, bucket: u32, a: &str, b: &str) -> Option<(Option<f64>, f64)> {
        let (ra, rb) = (self.row(bucket, a)?, self.row(bucket, b)?);
        let d = match (ra.mean_dssr, rb.mean_dssr) {
            (Some(x), Some(y)) => Some(x - y),
            _ => None,
        };
        Some((d, ra.mean_latency - rb.mean_latency))
    }
}

/// Per-bucket means for each policy, with deltas against the predictive
/// policy (or the first policy when predictive is absent).
pub fn compare_policies(reports: &[RunReport]) -> Result<ComparisonTable, MetricsError> {
    let first = reports.first().ok_or(MetricsError::EmptyRun)?;
    if let Some(r) = reports.iter().find(|r| r.scenario != first.scenario) {
        return Err(MetricsError::Mismatch(format!(
            "scenario `{}` vs `{}`",
            r.scenario, first.scenario
        )));
    }
    let mut seeds: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !seeds.contains_key(r.policy.as_str()) {
            order.push(&r.policy);
        }
        seeds.entry(&r.policy).or_default().insert(r.seed);
    }
    let seed_set = &seeds[first.policy.as_str()];
    if let Some((p, _)) = seeds.iter().find(|(_, s)| *s != seed_set) {
        return Err(MetricsError::Mismatch(format!("policy `{p}` ran a different seed set")));
    }
    let reference = if seeds.contains_key(Policy::Predictive.as_str()) {
        Policy::Predictive.as_str().to_string()
    } else {
        first.policy.clone()
    };

    // (bucket, policy) -> per-run means.
    #[derive(Default)]
    struct Cell {
        dssr: Vec<f64>,
        latency: Vec<f64>,
        sequencing: Vec<f64>,
    }
    let mut cells: BTreeMap<(u32, &str), Cell> = BTreeMap::new();
    for r in reports {
        let mut per_bucket: BTreeMap<u32, Vec<&CycleMetrics>> = BTreeMap::new();
        for c in &r.cycles {
            per_bucket.entry(speed_bucket(c.ego_speed_mps)).or_default().push(c);
        }
        for (bucket, cs) in per_bucket {
            let cell = cells.entry((bucket, r.policy.as_str())).or_default();
            if let Some(d) = mean(cs.iter().filter_map(|c| c.dssr_pct)) {
                cell.dssr.push(d);
            }
            cell.latency.push(mean(cs.iter().map(|c| c.latency_ms)).unwrap_or(0.0));
            cell.sequencing
                .push(mean(cs.iter().map(|c| c.sequencing_ms)).unwrap_or(0.0));
        }
    }

    let buckets: BTreeSet<u32> = cells.keys().map(|k| k.0).collect();
    let mut rows = Vec::new();
    for &bucket in &buckets {
        let stats = |p: &str| {
            cells.get(&(bucket, p)).map(|c| {
                (
                    c.latency.len(),
                    mean(c.dssr.iter().copied()),
                    mean(c.latency.iter().copied()).unwrap_or(0.0),
                    mean(c.sequencing.iter().copied()).unwrap_or(0.0),
                )
            })
        };
        let reference_stats = stats(&reference);
        for &p in &order {
            let Some((runs, d, l, s)) = stats(p) else { continue };
            let (delta_dssr_pp, delta_latency_ms, latency_reduction_pct) = match reference_stats {
                Some((_, rd, rl, _)) => (
                    rd.zip(d).map(|(a, b)| a - b),
                    rl - l,
                    (l > 0.0).then(|| 100.0 * (l - rl) / l),
                ),
                None => (None, 0.0, None),
            };
            rows.push(ComparisonRow {
                speed_bucket_mps: bucket,
                policy: p.to_string(),
                runs,
                mean_dssr: d,
                mean_latency: l,
                mean_sequencing: s,
                delta_dssr_pp,
                delta_latency_ms,
                latency_reduction_pct,
            });
        }
    }
    Ok(ComparisonTable {
        reference,
        scenario: first.scenario.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: String,
    pub seed: u64,
    pub cycle: u64,
    pub ego_speed_mps: f64,
    pub expected: usize,
    pub correct: usize,
    pub dssr_pct: Option<f64>,
    pub latency_ms: f64,
    pub sequencing_ms: f64,
    pub connection_ms: f64,
    pub prediction_ms: f64,
    pub max_aoi_ms: f64,
}

fn write_with_stamp<W: Write, T: Serialize>(
    mut out: W,
    timestamp: &str,
    rows: impl Iterator<Item = T>,
) -> Result<(), MetricsError> {
    writeln!(out, "# generated {timestamp}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_commented<R: Read, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>, MetricsError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    if rows.is_empty() {
        return Err(MetricsError::InvalidInput("no data rows".into()));
    }
    Ok(rows)
}

/// One row per cycle, after a `# generated <timestamp>` line.
pub fn write_report_csv<W: Write>(reports: &[RunReport], timestamp: &str, out: W) -> Result<(), MetricsError> {
    let rows = reports.iter().flat_map(|r| {
        r.cycles.iter().map(move |c| ReportRow {
            policy: r.policy.clone(),
            seed: r.seed,
            cycle: c.cycle,
            ego_speed_mps: c.ego_speed_mps,
            expected: c.expected,
            correct: c.correct,
            dssr_pct: c.dssr_pct,
            latency_ms: c.latency_ms,
            sequencing_ms: c.sequencing_ms,
            connection_ms: c.connection_ms,
            prediction_ms: c.prediction_ms,
            max_aoi_ms: c.max_aoi_ms,
        })
    });
    write_with_stamp(out, timestamp, rows)
}

pub fn read_report_csv<R: Read>(input: R) -> Result<Vec<ReportRow>, MetricsError> {
    read_commented(input)
}

pub fn write_comparison_csv<W: Write>(table: &ComparisonTable, timestamp: &str, out: W) -> Result<(), MetricsError> {
    write_with_stamp(out, timestamp, table.rows.iter())
}

pub fn read_comparison_csv<R: Read>(input: R) -> Result<Vec<ComparisonRow>, MetricsError> {
    read_commented(input)
}
