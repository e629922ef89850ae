#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use aoi_core::aggregator::{Action, AggregatorError, Disposition, EventStream, Forecaster, RunOutcome};
use aoi_core::channel::{UpdateMessage, UpdateSchedule};
use aoi_core::harness::{NodeSpec, Scenario};
use aoi_core::kinematics::{NodeId, NodeKind};
use aoi_core::predictor::FeatureWindow;
use rand::Rng;

pub const PERIOD_MS: f64 = 1000.0 / 3.0;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

/// A delivered update with an explicit arrival offset and AoI.
pub fn msg(node: NodeId, kind: NodeKind, cycle: u64, arrival_after_request: f64, aoi: f64) -> UpdateMessage {
    let request = (cycle - 1) as f64 * PERIOD_MS;
    UpdateMessage {
        source_id: node,
        source_kind: kind,
        cycle,
        originated_at: request - aoi,
        requested_at: request,
        distance_at_send: 0.0,
        relative_speed: 0.0,
        arrival_at: Some(request + arrival_after_request),
        aoi: Some(aoi),
    }
}

pub fn stream(cycles: u64, messages: Vec<UpdateMessage>) -> EventStream {
    let kinds = messages.iter().map(|m| (m.source_id, m.source_kind)).collect();
    let schedule = UpdateSchedule::new(3.0, cycles as f64 * PERIOD_MS).unwrap();
    EventStream::new(schedule, cycles, messages, kinds, vec![20.0; cycles as usize], vec![])
}

/// Every node delivers every cycle with the same arrival offset and AoI.
pub fn steady(nodes: &[(NodeId, NodeKind)], cycles: u64, arrival: f64, aoi: f64) -> EventStream {
    let mut msgs = Vec::new();
    for c in 1..=cycles {
        for &(n, k) in nodes {
            msgs.push(msg(n, k, c, arrival, aoi));
        }
    }
    stream(cycles, msgs)
}

/// Random traffic: nodes drift in and out, arrivals jitter across cycle
/// boundaries and some updates are stale.
pub fn random_stream<R: Rng>(rng: &mut R) -> EventStream {
    let cycles = rng.gen_range(3..16);
    let nodes = rng.gen_range(1..7u32);
    let mut msgs = Vec::new();
    for n in 1..=nodes {
        let kind = if rng.gen_bool(0.5) {
            NodeKind::Sensor
        } else {
            NodeKind::Vehicle
        };
        let first = rng.gen_range(1..=cycles);
        let last = rng.gen_range(first..=cycles);
        for c in first..=last {
            if rng.gen_bool(0.1) {
                continue;
            }
            let arrival = if rng.gen_bool(0.2) {
                rng.gen_range(300.0..1500.0)
            } else {
                rng.gen_range(5.0..300.0)
            };
            let aoi = rng.gen_range(0.0..600.0);
            msgs.push(msg(n, kind, c, arrival, aoi));
        }
    }
    stream(cycles, msgs)
}

/// Deterministic pseudo-forecasts that mix keep and drop verdicts.
#[derive(Debug, Clone)]
pub struct HashForecaster {
    pub salt: u64,
}

impl Forecaster for HashForecaster {
    fn forecast(
        &mut self,
        node: NodeId,
        _kind: NodeKind,
        _window: &FeatureWindow,
        last_cycle: u64,
        horizon: usize,
    ) -> Result<f64, AggregatorError> {
        let mut h = self.salt ^ (u64::from(node) << 32) ^ (last_cycle * 31 + horizon as u64);
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
        Ok((h % 500) as f64)
    }
}

/// Always predicts the same AoI.
#[derive(Debug, Clone, Copy)]
pub struct ConstForecaster(pub f64);

impl Forecaster for ConstForecaster {
    fn forecast(
        &mut self,
        _: NodeId,
        _: NodeKind,
        _: &FeatureWindow,
        _: u64,
        _: usize,
    ) -> Result<f64, AggregatorError> {
        Ok(self.0)
    }
}

/// Every delivered update ends in at most one segment, and every
/// disposition agrees with the cycle records. Returns a description of the
/// first violation.
pub fn check_conservation(stream: &EventStream, out: &RunOutcome, history_depth: u64) -> Result<(), String> {
    if out.dispositions.len() != stream.messages.len() {
        return Err(format!(
            "{} dispositions for {} messages",
            out.dispositions.len(),
            stream.messages.len()
        ));
    }
    let mut seen: BTreeMap<usize, u64> = BTreeMap::new();
    for r in &out.cycles {
        for p in &r.placed {
            let i = p.index.ok_or("placement without message index")?;
            if let Some(prev) = seen.insert(i, r.cycle) {
                return Err(format!("message {i} placed in segments {prev} and {}", r.cycle));
            }
            if out.dispositions[i] != (Disposition::Placed { segment: r.cycle }) {
                return Err(format!(
                    "message {i} in segment {} but marked {:?}",
                    r.cycle, out.dispositions[i]
                ));
            }
        }
    }
    let (last, end) = out
        .cycles
        .last()
        .map_or((0, f64::NEG_INFINITY), |r| (r.cycle, r.close_ms));
    for (i, d) in out.dispositions.iter().enumerate() {
        let m = &stream.messages[i];
        // Unhandled is fine after the run ended or while still buffered.
        let pending = m.arrival() >= end || m.cycle + history_depth >= last;
        match d {
            Disposition::Placed { segment } if seen.get(&i) != Some(segment) => {
                return Err(format!("message {i} marked placed in {segment} but absent"));
            }
            Disposition::Unprocessed if !pending => {
                return Err(format!(
                    "message {i} of cycle {} never handled",
                    stream.messages[i].cycle
                ));
            }
            _ => {}
        }
    }
    Ok(())
}

/// No segment at or after a termination holds the node's updates unless the
/// node was admitted again in between.
pub fn check_terminate_then_silence(out: &RunOutcome) -> Result<(), String> {
    for t in out.decisions.iter().filter(|d| d.action == Action::Terminate) {
        for r in out.cycles.iter().filter(|r| r.cycle >= t.effective_cycle) {
            if !r.placed.iter().any(|p| p.node == t.node) {
                continue;
            }
            let readmitted = out.decisions.iter().any(|d| {
                d.node == t.node
                    && d.action == Action::Initiate
                    && d.decided_cycle >= t.decided_cycle
                    && d.decided_cycle <= r.cycle
            });
            if !readmitted {
                return Err(format!(
                    "node {} terminated from cycle {} but placed in segment {}",
                    t.node, t.effective_cycle, r.cycle
                ));
            }
        }
    }
    Ok(())
}

/// A short random roster on an open road; node 1 starts within range.
pub fn random_scenario<R: Rng>(rng: &mut R) -> Scenario {
    let base = "duration_ms = 4000.0\n[ego]\nposition = 0.0\nspeed = 20.0\n[[node]]\nid = 1\nkind = \"sensor\"\nposition = 0.0\n";
    let mut s = Scenario::from_toml(base).unwrap();
    s.nodes.clear();
    s.ego.speed = Some(rng.gen_range(15.0..30.0));
    let n = rng.gen_range(1..6u32);
    for id in 1..=n {
        let vehicle = rng.gen_bool(0.5);
        s.nodes.push(NodeSpec {
            id,
            kind: if vehicle { NodeKind::Vehicle } else { NodeKind::Sensor },
            position: if id == 1 {
                rng.gen_range(0.0..40.0)
            } else {
                rng.gen_range(-150.0..250.0)
            },
            speed: if vehicle { rng.gen_range(5.0..30.0) } else { 0.0 },
            lane: 0,
            coverage: None,
        });
    }
    s
}
