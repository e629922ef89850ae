//! Ego-side service aggregation: the update buffer with per-cycle segments,
//! connection decisions, and the four sequencing policies.
//!
//! Every policy consumes the same [`EventStream`] (all delivered updates of a
//! run, ordered by arrival) so comparisons between policies are paired.

mod buffer;
mod fill;
mod forecast;
mod ordered;

pub use buffer::{
    admit_new_node, on_update, NodeRegistry, Placement, PlacementOutcome, RegistryEntry, Segment, UpdateBuffer,
};
pub use forecast::{Forecaster, ModelBank, NodeHistory, OracleForecaster};
pub use ordered::periodic_decision;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{TraceRow, UpdateMessage, UpdateSchedule};
use crate::kinematics::{NodeId, NodeKind};
use crate::predictor::PredictorError;

#[derive(Debug, Error)]
pub enum AggregatorError {
    #[error("invalid aggregator configuration: {0}")]
    InvalidConfig(String),
    #[error("no trained model for {kind} nodes with horizon {horizon}")]
    MissingModel { kind: NodeKind, horizon: usize },
    #[error("cycle {cycle}: {source}")]
    Prediction {
        cycle: u64,
        #[source]
        source: PredictorError,
    },
    #[error("predictive policy needs a forecaster")]
    NoForecaster,
    #[error("event log csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Policy {
    #[default]
    #[serde(rename = "predictive")]
    Predictive,
    #[serde(rename = "fifo")]
    Fifo,
    #[serde(rename = "stop-n-wait")]
    StopNWait,
    #[serde(rename = "priority")]
    Priority,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Predictive, Policy::Fifo, Policy::StopNWait, Policy::Priority];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Predictive => "predictive",
            Policy::Fifo => "fifo",
            Policy::StopNWait => "stop-n-wait",
            Policy::Priority => "priority",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Policy {
    type Err = AggregatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "predictive" => Ok(Policy::Predictive),
            "fifo" => Ok(Policy::Fifo),
            "stop-n-wait" | "stop-and-wait" => Ok(Policy::StopNWait),
            "priority" => Ok(Policy::Priority),
            other => Err(AggregatorError::InvalidConfig(format!(
                "unknown policy `{other}` (expected predictive, fifo, stop-n-wait or priority)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub max_aoi_ms: f64,
    pub period_ms: f64,
    /// Segment deadline after the request time (predictive, fifo, priority).
    pub deadline_ms: f64,
    /// Per-node wait bound of stop-n-wait after the request time.
    pub stop_wait_timeout_ms: f64,
    /// Closed segments that still accept late updates.
    pub history_depth: u64,
    /// Consecutive missed cycles after which a baseline forgets a node.
    pub link_timeout_cycles: u32,
    /// AoI bucket for sharing forecasts; `None` disables clustering.
    pub cluster_bucket_ms: Option<f64>,
    /// Cost of one initiate, maintain or terminate decision.
    pub decision_cost_ms: f64,
    /// Bookkeeping cost of receiving one update.
    pub message_cost_ms: f64,
    /// Modeled cost of one batch of forecasts.
    pub l_pred_ms: f64,
    pub window: usize,
    pub sensor_period: usize,
    pub vehicle_period: usize,
}

impl AggregatorConfig {
    pub fn connection_cost(&self, processed: usize, decisions: usize) -> f64 {
        self.decision_cost_ms * decisions as f64 + self.message_cost_ms * processed as f64
    }

    pub fn for_rate(q: f64) -> Self {
        let period = 1000.0 / q;
        Self {
            max_aoi_ms: period,
            period_ms: period,
            deadline_ms: period,
            stop_wait_timeout_ms: 3.0 * period,
            ..Self::default()
        }
    }

    pub fn period_for(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Sensor => self.sensor_period,
            NodeKind::Vehicle => self.vehicle_period,
        }
        .max(1)
    }

    pub fn validate(&self) -> Result<(), AggregatorError> {
        let bad = |m: &str| Err(AggregatorError::InvalidConfig(m.to_string()));
        if !(self.max_aoi_ms > 0.0) || !(self.period_ms > 0.0) {
            return bad("max_aoi_ms and period_ms must be positive");
        }
        if !(self.deadline_ms >= 0.0) || !(self.stop_wait_timeout_ms >= 0.0) {
            return bad("deadlines must be >= 0");
        }
        if self.window == 0 {
            return bad("window must be >= 1");
        }
        if self.sensor_period == 0 || self.vehicle_period == 0 {
            return bad("prediction periods must be >= 1");
        }
        if self.link_timeout_cycles == 0 {
            return bad("link_timeout_cycles must be >= 1");
        }
        if self.cluster_bucket_ms.is_some_and(|w| !(w > 0.0)) {
            return bad("cluster_bucket_ms must be positive");
        }
        if !(self.decision_cost_ms >= 0.0) || !(self.message_cost_ms >= 0.0) || !(self.l_pred_ms >= 0.0) {
            return bad("costs must be >= 0");
        }
        Ok(())
    }
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            max_aoi_ms: 1000.0 / 3.0,
            period_ms: 1000.0 / 3.0,
            deadline_ms: 1000.0 / 3.0,
            stop_wait_timeout_ms: 1000.0,
            history_depth: 2,
            link_timeout_cycles: 1,
            cluster_bucket_ms: Some(10.0),
            decision_cost_ms: 3.0,
            message_cost_ms: 0.2,
            l_pred_ms: 100.0,
            window: 10,
            sensor_period: 5,
            vehicle_period: 10,
        }
    }
}

/// All delivered updates of one run plus the ground truth needed by oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub schedule: UpdateSchedule,
    pub cycles: u64,
    /// Delivered updates with `arrival_at` and `aoi` set, ordered by arrival.
    pub messages: Vec<UpdateMessage>,
    pub kinds: BTreeMap<NodeId, NodeKind>,
    /// Ego speed at each cycle's request time, index `cycle - 1`.
    pub ego_speed: Vec<f64>,
    /// One row per node per cycle.
    pub trace: Vec<TraceRow>,
}

impl EventStream {
    pub fn new(
        schedule: UpdateSchedule,
        cycles: u64,
        mut messages: Vec<UpdateMessage>,
        kinds: BTreeMap<NodeId, NodeKind>,
        ego_speed: Vec<f64>,
        trace: Vec<TraceRow>,
    ) -> Self {
        messages.retain(|m| m.arrival_at.is_some() && m.aoi.is_some());
        messages.sort_by(|a, b| {
            a.arrival()
                .total_cmp(&b.arrival())
                .then(a.source_id.cmp(&b.source_id))
                .then(a.cycle.cmp(&b.cycle))
        });
        Self {
            schedule,
            cycles,
            messages,
            kinds,
            ego_speed,
            trace,
        }
    }

    pub fn request_time(&self, cycle: u64) -> f64 {
        self.schedule.request_time(cycle)
    }

    pub fn ego_speed_at(&self, cycle: u64) -> f64 {
        self.ego_speed
            .get(cycle.saturating_sub(1) as usize)
            .copied()
            .unwrap_or(0.0)
    }

    /// SHA-256 over the arrival-ordered updates, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.cycles.to_le_bytes());
        for m in &self.messages {
            h.update(m.source_id.to_le_bytes());
            h.update(m.cycle.to_le_bytes());
            for v in [
                m.originated_at,
                m.requested_at,
                m.distance_at_send,
                m.relative_speed,
                m.arrival(),
                m.aoi_ms(),
            ] {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueReason {
    /// Arrived while an earlier segment was still open; parked.
    Early,
    /// Arrived after its segment closed; placed into the closed segment.
    Late,
    /// Arrived too late for any open history; discarded.
    Stale,
    /// Filled a segment of a different cycle.
    Misplaced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencingIssue {
    pub node: NodeId,
    pub expected_cycle: u64,
    pub actual_cycle: u64,
    /// `actual_cycle - expected_cycle`, never zero.
    pub offset: i64,
    pub detected_at: f64,
    pub reason: IssueReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Initiate,
    Maintain,
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Measured,
    Predicted,
    /// No full feature window yet; the node is kept by default.
    Deferred,
    /// The node stopped delivering.
    LinkLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionDecision {
    pub node: NodeId,
    pub action: Action,
    pub decided_cycle: u64,
    pub effective_cycle: u64,
    pub basis: Basis,
    pub predicted_aoi: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Stale,
    /// AoI above the threshold.
    Freshness,
    /// Source terminated or unknown.
    Terminated,
}

/// Final fate of one delivered update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Placed {
        segment: u64,
    },
    PlacedLate {
        segment: u64,
    },
    Discarded(DiscardReason),
    /// Still buffered when the run ended.
    Unprocessed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: u64,
    pub request_ms: f64,
    pub open_ms: f64,
    pub close_ms: f64,
    pub expected: Vec<NodeId>,
    /// Expected nodes whose own update for this cycle was sequenced here.
    pub correct: Vec<NodeId>,
    pub missing: Vec<NodeId>,
    /// Sequence handed to the application, in order.
    pub placed: Vec<Placement>,
    /// Mean age of this cycle's sequenced updates at release.
    pub sequencing_ms: f64,
    pub connection_ms: f64,
    pub prediction_ms: f64,
    pub processed: usize,
    pub max_aoi_observed: f64,
    pub ego_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogRow {
    pub cycle: u64,
    pub node: Option<NodeId>,
    pub action: String,
    pub segment: Option<u64>,
    pub offset: i64,
    pub wait_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub policy: Policy,
    pub stream_hash: String,
    pub cycles: Vec<CycleRecord>,
    pub issues: Vec<SequencingIssue>,
    pub decisions: Vec<ConnectionDecision>,
    pub log: Vec<EventLogRow>,
    /// Indexed like `EventStream::messages`.
    pub dispositions: Vec<Disposition>,
    pub prediction_invocations: usize,
}

/// Runs one policy over a stream. `forecaster` is required by the
/// predictive policy and ignored by the baselines.
pub fn run_policy(
    stream: &EventStream,
    policy: Policy,
    config: &AggregatorConfig,
    forecaster: Option<&mut dyn Forecaster>,
) -> Result<RunOutcome, AggregatorError> {
    config.validate()?;
    match policy {
        Policy::Predictive => {
            let f = forecaster.ok_or(AggregatorError::NoForecaster)?;
            ordered::run(stream, policy, config, Some(f))
        }
        Policy::StopNWait => ordered::run(stream, policy, config, None),
        Policy::Fifo | Policy::Priority => fill::run(stream, policy, config),
    }
}

pub fn write_event_log<W: Write>(rows: &[EventLogRow], out: W) -> Result<(), AggregatorError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_event_log<R: Read>(input: R) -> Result<Vec<EventLogRow>, AggregatorError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(AggregatorError::from)).collect()
}

/// Shared bookkeeping for both engines.
pub(crate) struct Recorder {
    pub issues: Vec<SequencingIssue>,
    pub decisions: Vec<ConnectionDecision>,
    pub log: Vec<EventLogRow>,
    pub dispositions: Vec<Disposition>,
    /// Log rows whose `wait_ms` is set when their segment closes.
    pending_wait: Vec<(usize, u64, f64)>,
}

impl Recorder {
    pub fn new(messages: usize) -> Self {
        Self {
            issues: Vec::new(),
            decisions: Vec::new(),
            log: Vec::new(),
            dispositions: vec![Disposition::Unprocessed; messages],
            pending_wait: Vec::new(),
        }
    }

    pub fn event(
        &mut self,
        cycle: u64,
        node: Option<NodeId>,
        action: &str,
        segment: Option<u64>,
        offset: i64,
        wait_ms: f64,
    ) {
        self.log.push(EventLogRow {
            cycle,
            node,
            action: action.to_string(),
            segment,
            offset,
            wait_ms,
        });
    }

    /// Logs a placement into `segment`; its wait is filled in at close.
    pub fn placement(&mut self, cycle: u64, node: NodeId, segment: u64, offset: i64, arrival: f64) {
        self.event(cycle, Some(node), "place", Some(segment), offset, 0.0);
        self.pending_wait.push((self.log.len() - 1, segment, arrival));
    }

    pub fn close_segment(&mut self, segment: u64, close: f64) {
        let log = &mut self.log;
        self.pending_wait.retain(|&(row, seg, arrival)| {
            if seg == segment {
                log[row].wait_ms = (close - arrival).max(0.0);
                false
            } else {
                true
            }
        });
    }

    pub fn issue(&mut self, node: NodeId, expected: u64, actual: u64, at: f64, reason: IssueReason) {
        let offset = actual as i64 - expected as i64;
        if offset != 0 {
            self.issues.push(SequencingIssue {
                node,
                expected_cycle: expected,
                actual_cycle: actual,
                offset,
                detected_at: at,
                reason,
            });
        }
    }

    pub fn decide(&mut self, d: ConnectionDecision) {
        let action = match d.action {
            Action::Initiate => "initiate",
            Action::Maintain => "maintain",
            Action::Terminate => "terminate",
        };
        self.event(
            d.decided_cycle,
            Some(d.node),
            action,
            None,
            d.effective_cycle as i64 - d.decided_cycle as i64,
            0.0,
        );
        self.decisions.push(d);
    }
}

/// Mean age of the on-time updates at release, or the segment's own wait
/// when nothing was sequenced on time.
pub(crate) fn sequencing_latency(placed: &[Placement], cycle: u64, request: f64, close: f64) -> f64 {
    let on_time: Vec<f64> = placed
        .iter()
        .filter(|p| p.msg_cycle == cycle)
        .map(|p| close - p.originated_at)
        .collect();
    if on_time.is_empty() {
        close - request
    } else {
        on_time.iter().sum::<f64>() / on_time.len() as f64
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn policy_names_roundtrip() {
        for p in Policy::ALL {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
        assert!("lifo".parse::<Policy>().is_err());
    }

    #[test]
    fn stream_hash_tracks_content() {
        let a = steady(&[(1, NodeKind::Sensor)], 3, 40.0, 100.0);
        let b = steady(&[(1, NodeKind::Sensor)], 3, 40.0, 100.0);
        let c = steady(&[(1, NodeKind::Sensor)], 3, 41.0, 100.0);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn event_log_roundtrip() {
        let rows = vec![
            EventLogRow {
                cycle: 1,
                node: Some(3),
                action: "place".into(),
                segment: Some(1),
                offset: 0,
                wait_ms: 12.5,
            },
            EventLogRow {
                cycle: 2,
                node: None,
                action: "close".into(),
                segment: Some(2),
                offset: 0,
                wait_ms: 40.0,
            },
        ];
        let mut buf = Vec::new();
        write_event_log(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("cycle,node,action,segment,offset,wait_ms"));
        assert_eq!(read_event_log(buf.as_slice()).unwrap(), rows);
    }
}
