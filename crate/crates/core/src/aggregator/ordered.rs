//! Engines that keep every update in its own cycle's segment: the predictive
//! policy and stop-n-wait. Segments close strictly in cycle order.

use std::collections::{BTreeMap, BTreeSet};

use super::buffer::{admit_new_node, on_update, NodeRegistry, Placement, PlacementOutcome, UpdateBuffer};
use super::forecast::{Forecaster, NodeHistory};
use super::{
    sequencing_latency, Action, AggregatorConfig, AggregatorError, Basis, ConnectionDecision, CycleRecord,
    DiscardReason, Disposition, EventStream, IssueReason, Policy, Recorder, RunOutcome,
};
use crate::kinematics::{NodeId, NodeKind};
use crate::predictor::{cluster_nodes, FeatureWindow};

/// Turns a forecast into Maintain or a Terminate effective one period later.
fn apply_forecast(
    node: NodeId,
    predicted: f64,
    cycle: u64,
    max_aoi: f64,
    registry: &mut NodeRegistry,
) -> Option<ConnectionDecision> {
    let entry = registry.get_mut(node)?;
    entry.last_prediction = Some(predicted);
    let (action, effective_cycle) = if predicted > max_aoi {
        let at = cycle + entry.period as u64;
        entry.terminate_at = Some(at);
        (Action::Terminate, at)
    } else {
        (Action::Maintain, cycle)
    };
    entry.action = action;
    Some(ConnectionDecision {
        node,
        action,
        decided_cycle: cycle,
        effective_cycle,
        basis: Basis::Predicted,
        predicted_aoi: Some(predicted),
    })
}

/// Decision for one node at cycle `cycle`. Returns `None` when the node is
/// not due (`cycle mod N_n != 0`) or not active.
pub fn periodic_decision(
    node: NodeId,
    kind: NodeKind,
    forecaster: &mut dyn Forecaster,
    window: Option<(&FeatureWindow, u64)>,
    cycle: u64,
    max_aoi: f64,
    registry: &mut NodeRegistry,
) -> Result<Option<ConnectionDecision>, AggregatorError> {
    let Some(entry) = registry.get_mut(node) else {
        return Ok(None);
    };
    if !cycle.is_multiple_of(entry.period as u64) || entry.terminate_at.is_some() {
        return Ok(None);
    }
    let Some((w, last)) = window else {
        entry.action = Action::Maintain;
        return Ok(Some(ConnectionDecision {
            node,
            action: Action::Maintain,
            decided_cycle: cycle,
            effective_cycle: cycle,
            basis: Basis::Deferred,
            predicted_aoi: None,
        }));
    };
    let period = entry.period;
    let predicted = forecaster.forecast(node, kind, w, last, period)?;
    Ok(apply_forecast(node, predicted, cycle, max_aoi, registry))
}

struct Engine<'a> {
    stream: &'a EventStream,
    cfg: &'a AggregatorConfig,
    predictive: bool,
    rec: Recorder,
    buffer: UpdateBuffer,
    registry: NodeRegistry,
    history: NodeHistory,
    /// `(node, cycle)` updates refused by the freshness check.
    rejected: BTreeSet<(NodeId, u64)>,
    /// Prediction cost charged to each cycle.
    amortized: BTreeMap<u64, f64>,
    invocations: usize,
}

impl Engine<'_> {
    fn kind_of(&self, node: NodeId) -> NodeKind {
        self.stream.kinds.get(&node).copied().unwrap_or(NodeKind::Sensor)
    }

    fn discard(&mut self, i: usize, node: NodeId, reason: DiscardReason, offset: i64) {
        self.rec.dispositions[i] = Disposition::Discarded(reason);
        let c = self.buffer.current_cycle;
        self.rec.event(c, Some(node), "discard", None, offset, 0.0);
    }

    /// Processes one arrival against the current segment.
    fn handle(&mut self, i: usize) {
        let m = &self.stream.messages[i];
        let (node, k, t) = (m.source_id, m.cycle, m.arrival());
        let c = self.buffer.current_cycle;
        let offset = k as i64 - c as i64;
        let max = self.cfg.max_aoi_ms;
        self.history.record(m);

        let terminated_for = |reg: &NodeRegistry| reg.get(node).and_then(|e| e.terminate_at).is_some_and(|at| k >= at);
        if !self.registry.contains(node) && k < c {
            self.discard(i, node, DiscardReason::Terminated, offset);
            return;
        }
        if self.predictive && terminated_for(&self.registry) {
            self.discard(i, node, DiscardReason::Terminated, offset);
            return;
        }
        if !self.registry.contains(node) {
            let period = self.cfg.period_for(m.source_kind);
            if self.predictive {
                match admit_new_node(m, max, c, period, &mut self.registry) {
                    Some(d) => self.rec.decide(d),
                    None => {
                        self.discard(i, node, DiscardReason::Freshness, offset);
                        return;
                    }
                }
            } else {
                self.registry.insert(node, m.source_kind, period);
                self.rec.decide(ConnectionDecision {
                    node,
                    action: Action::Initiate,
                    decided_cycle: c,
                    effective_cycle: c,
                    basis: Basis::Measured,
                    predicted_aoi: None,
                });
            }
        }

        let outcome = if self.predictive {
            on_update(m, Some(i), &mut self.buffer, max)
        } else {
            self.buffer.place(Placement::from_message(m, Some(i)))
        };
        match outcome {
            PlacementOutcome::Placed { segment } => {
                self.rec.dispositions[i] = Disposition::Placed { segment };
                self.rec.placement(c, node, segment, 0, t);
            }
            PlacementOutcome::Parked { offset } => {
                self.rec.issue(node, c, k, t, IssueReason::Early);
                self.rec.event(c, Some(node), "park", Some(k), offset, 0.0);
            }
            PlacementOutcome::PlacedLate { segment, offset } => {
                self.rec.dispositions[i] = Disposition::PlacedLate { segment };
                self.rec.issue(node, c, k, t, IssueReason::Late);
                self.rec.event(c, Some(node), "late", Some(segment), offset, 0.0);
            }
            PlacementOutcome::Stale { offset } => {
                self.rec.issue(node, c, k, t, IssueReason::Stale);
                self.discard(i, node, DiscardReason::Stale, offset);
                self.rec.log.last_mut().expect("just logged").action = "stale".into();
            }
            PlacementOutcome::Discarded(reason) => {
                if reason == DiscardReason::Freshness {
                    self.rejected.insert((node, k));
                }
                self.discard(i, node, reason, offset);
            }
        }
    }

    /// Re-places updates parked for the cycle being opened.
    fn unpark(&mut self, c: u64) {
        for p in self.buffer.open(c) {
            let i = p.index.expect("engine placements carry their index");
            let gone = !self.registry.contains(p.node)
                || (self.predictive
                    && self
                        .registry
                        .get(p.node)
                        .and_then(|e| e.terminate_at)
                        .is_some_and(|at| p.msg_cycle >= at));
            if gone {
                self.discard(i, p.node, DiscardReason::Terminated, 0);
                continue;
            }
            let (node, arrival) = (p.node, p.arrival_ms);
            if let PlacementOutcome::Placed { segment } = self.buffer.place(p) {
                self.rec.dispositions[i] = Disposition::Placed { segment };
                self.rec.placement(c, node, segment, 0, arrival);
            }
        }
    }

    /// Removes nodes whose predicted termination takes effect now.
    fn apply_terminations(&mut self, c: u64) {
        let due: Vec<NodeId> = self
            .registry
            .active()
            .filter(|(_, e)| e.terminate_at.is_some_and(|at| at <= c))
            .map(|(id, _)| id)
            .collect();
        for node in due {
            self.registry.remove(node);
            self.rec.event(c, Some(node), "remove", None, 0, 0.0);
        }
    }

    /// Runs the forecasts due at cycle `c`; returns the number of decisions.
    fn decide(&mut self, c: u64, now: f64, forecaster: &mut dyn Forecaster) -> Result<usize, AggregatorError> {
        let due: Vec<(NodeId, NodeKind, usize, Option<f64>)> = self
            .registry
            .active()
            .filter(|(_, e)| e.terminate_at.is_none() && c.is_multiple_of(e.period as u64))
            .map(|(id, e)| (id, e.kind, e.period, e.last_prediction))
            .collect();
        if due.is_empty() {
            return Ok(0);
        }
        let max = self.cfg.max_aoi_ms;
        let mut windows: BTreeMap<NodeId, (FeatureWindow, u64)> = BTreeMap::new();
        let mut decisions = 0;
        for &(node, kind, _, _) in &due {
            match self.history.window(node, now, self.cfg.window) {
                Some(w) => {
                    windows.insert(node, w);
                }
                None => {
                    let d = periodic_decision(node, kind, forecaster, None, c, max, &mut self.registry)?;
                    if let Some(d) = d {
                        self.rec.decide(d);
                        decisions += 1;
                    }
                }
            }
        }

        // Nodes whose last forecasts share a bucket reuse one forecast.
        let mut groups: BTreeMap<(NodeKind, usize), BTreeMap<NodeId, f64>> = BTreeMap::new();
        let mut singles: Vec<NodeId> = Vec::new();
        for &(node, kind, period, last) in &due {
            if !windows.contains_key(&node) {
                continue;
            }
            match (self.cfg.cluster_bucket_ms, last) {
                (Some(_), Some(p)) if p.is_finite() => {
                    groups.entry((kind, period)).or_default().insert(node, p);
                }
                _ => singles.push(node),
            }
        }
        let mut batches: Vec<Vec<NodeId>> = singles.into_iter().map(|n| vec![n]).collect();
        let width = self.cfg.cluster_bucket_ms.unwrap_or(f64::INFINITY);
        for map in groups.values() {
            batches.extend(cluster_nodes(map, width).into_iter().map(|cl| cl.members));
        }
        batches.sort();

        let mut min_period = usize::MAX;
        for members in batches {
            let rep = members[0];
            let kind = self.kind_of(rep);
            let (w, last) = &windows[&rep];
            let period = self.registry.get(rep).map_or(1, |e| e.period);
            let predicted = forecaster.forecast(rep, kind, w, *last, period).map_err(|e| match e {
                AggregatorError::Prediction { source, .. } => AggregatorError::Prediction { cycle: c, source },
                other => other,
            })?;
            self.invocations += 1;
            min_period = min_period.min(period);
            for node in members {
                if let Some(d) = apply_forecast(node, predicted, c, max, &mut self.registry) {
                    self.rec.decide(d);
                    decisions += 1;
                }
            }
        }
        if min_period != usize::MAX {
            let share = self.cfg.l_pred_ms / min_period as f64;
            for j in 0..min_period as u64 {
                *self.amortized.entry(c + j).or_default() += share;
            }
        }
        Ok(decisions)
    }
}

pub(super) fn run(
    stream: &EventStream,
    policy: Policy,
    cfg: &AggregatorConfig,
    mut forecaster: Option<&mut dyn Forecaster>,
) -> Result<RunOutcome, AggregatorError> {
    let predictive = policy == Policy::Predictive;
    let mut e = Engine {
        stream,
        cfg,
        predictive,
        rec: Recorder::new(stream.messages.len()),
        buffer: UpdateBuffer::new(cfg.history_depth),
        registry: NodeRegistry::default(),
        history: NodeHistory::default(),
        rejected: BTreeSet::new(),
        amortized: BTreeMap::new(),
        invocations: 0,
    };
    let msgs = &stream.messages;
    let mut next = 0;
    let mut close_prev = f64::NEG_INFINITY;
    let mut records = Vec::with_capacity(stream.cycles as usize);
    let wait_bound = if predictive {
        cfg.deadline_ms
    } else {
        cfg.stop_wait_timeout_ms
    };

    for c in 1..=stream.cycles {
        let request = stream.request_time(c);
        let open = request.max(close_prev);
        e.buffer.current_cycle = c;
        let decisions_before = e.rec.decisions.len();
        let mut processed = 0;
        while next < msgs.len() && msgs[next].arrival() < open {
            e.handle(next);
            next += 1;
            processed += 1;
        }

        if predictive {
            e.apply_terminations(c);
        }
        e.unpark(c);
        if let Some(f) = forecaster.as_deref_mut() {
            e.decide(c, open, f)?;
        }
        let expected = e.registry.expected();

        // An empty registry listens for the whole window to discover sources.
        let complete = |e: &Engine| {
            !expected.is_empty()
                && expected
                    .iter()
                    .all(|&n| e.buffer.has_on_time(n, c) || e.rejected.contains(&(n, c)))
        };
        let deadline = request
            + if expected.is_empty() {
                cfg.deadline_ms
            } else {
                wait_bound
            };
        let close = if complete(&e) {
            open
        } else {
            loop {
                if next >= msgs.len() || msgs[next].arrival() > deadline {
                    break open.max(deadline);
                }
                let t = msgs[next].arrival();
                e.handle(next);
                next += 1;
                processed += 1;
                if complete(&e) {
                    break t.max(open);
                }
            }
        };

        let mut correct = Vec::new();
        let mut missing = Vec::new();
        for &n in &expected {
            if e.buffer.has_on_time(n, c) {
                correct.push(n);
            } else if !e.rejected.contains(&(n, c)) {
                missing.push(n);
            }
        }
        for &n in &missing {
            e.rec.event(c, Some(n), "missing", Some(c), 0, close - request);
        }
        // Connection upkeep after the segment's verdict.
        for &n in &expected {
            let on_time = e.buffer.has_on_time(n, c);
            let Some(entry) = e.registry.get_mut(n) else { continue };
            if on_time || e.rejected.contains(&(n, c)) {
                entry.misses = 0;
                continue;
            }
            entry.misses += 1;
            let limit = if predictive { 1 } else { cfg.link_timeout_cycles };
            if entry.misses >= limit {
                e.registry.remove(n);
                e.rec.decide(ConnectionDecision {
                    node: n,
                    action: Action::Terminate,
                    decided_cycle: c,
                    effective_cycle: c + 1,
                    basis: if predictive { Basis::Measured } else { Basis::LinkLoss },
                    predicted_aoi: None,
                });
            }
        }
        let decisions = e.rec.decisions.len() - decisions_before;

        let placed = e.buffer.segment(c).map(|s| s.placed.clone()).unwrap_or_default();
        let max_aoi_observed = placed
            .iter()
            .filter(|p| p.msg_cycle == c)
            .map(|p| p.aoi_ms)
            .fold(0.0, f64::max);
        records.push(CycleRecord {
            cycle: c,
            request_ms: request,
            open_ms: open,
            close_ms: close,
            expected,
            correct,
            missing,
            sequencing_ms: sequencing_latency(&placed, c, request, close),
            connection_ms: cfg.connection_cost(processed, decisions),
            prediction_ms: e.amortized.remove(&c).unwrap_or(0.0),
            processed,
            placed,
            max_aoi_observed,
            ego_speed: stream.ego_speed_at(c),
        });
        e.rec.close_segment(c, close);
        e.rec.event(c, None, "close", Some(c), 0, close - request);
        e.buffer.close(c);
        e.rejected.retain(|&(_, k)| k + cfg.history_depth >= c);
        close_prev = close;
    }

    for p in e.buffer.drain_parked() {
        if let Some(i) = p.index {
            e.rec.dispositions[i] = Disposition::Unprocessed;
        }
    }
    Ok(RunOutcome {
        policy,
        stream_hash: stream.hash(),
        cycles: records,
        issues: e.rec.issues,
        decisions: e.rec.decisions,
        log: e.rec.log,
        dispositions: e.rec.dispositions,
        prediction_invocations: e.invocations,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{run_policy, OracleForecaster};
    use super::*;

    fn cfg() -> AggregatorConfig {
        AggregatorConfig::for_rate(3.0)
    }

    #[test]
    fn in_order_arrivals_close_early_without_failures() {
        let s = steady(&[(1, NodeKind::Sensor), (2, NodeKind::Vehicle)], 6, 40.0, 100.0);
        let mut oracle = OracleForecaster::default();
        let out = run_policy(&s, Policy::Predictive, &cfg(), Some(&mut oracle)).unwrap();
        for r in &out.cycles[1..] {
            assert_eq!(r.correct.len(), 2);
            assert!(r.missing.is_empty());
            assert!((r.close_ms - (r.request_ms + 40.0)).abs() < 1e-9);
        }
        assert!(out.issues.is_empty());
    }

    #[test]
    fn silent_node_closes_at_deadline_with_one_failure() {
        let mut msgs = vec![];
        for c in 1..=4 {
            msgs.push(msg(1, NodeKind::Vehicle, c, 40.0, 100.0));
            if c < 3 {
                msgs.push(msg(2, NodeKind::Sensor, c, 40.0, 100.0));
            }
        }
        let s = stream(4, msgs);
        let mut oracle = OracleForecaster::default();
        let out = run_policy(&s, Policy::Predictive, &cfg(), Some(&mut oracle)).unwrap();
        let r3 = &out.cycles[2];
        assert_eq!(r3.missing, vec![2]);
        assert!((r3.close_ms - (r3.request_ms + cfg().deadline_ms)).abs() < 1e-9);
        // Dropped after the miss: not expected afterwards.
        assert_eq!(out.cycles[3].expected, vec![1]);
    }

    #[test]
    fn stop_n_wait_places_late_update_correctly() {
        let mut msgs = vec![];
        for c in 1..=4 {
            msgs.push(msg(1, NodeKind::Vehicle, c, 40.0, 100.0));
            msgs.push(msg(2, NodeKind::Sensor, c, if c == 2 { 600.0 } else { 40.0 }, 100.0));
        }
        let s = stream(4, msgs);
        let out = run_policy(&s, Policy::StopNWait, &cfg(), None).unwrap();
        let r2 = &out.cycles[1];
        assert_eq!(r2.correct.len(), 2);
        assert!((r2.close_ms - (r2.request_ms + 600.0)).abs() < 1e-9);
        // Node 1's cycle-3 update landed while segment 2 waited.
        assert!(out
            .issues
            .iter()
            .any(|i| i.node == 1 && i.offset == 1 && i.reason == IssueReason::Early));
        assert!(out.cycles.iter().skip(1).all(|r| r.missing.is_empty()));
    }

    #[test]
    fn never_arriving_update_waits_full_timeout() {
        let mut msgs = vec![];
        for c in 1..=3 {
            msgs.push(msg(1, NodeKind::Vehicle, c, 40.0, 100.0));
        }
        msgs.push(msg(2, NodeKind::Sensor, 1, 40.0, 100.0));
        let s = stream(3, msgs);
        let out = run_policy(&s, Policy::StopNWait, &cfg(), None).unwrap();
        let r2 = &out.cycles[1];
        assert_eq!(r2.missing, vec![2]);
        assert!((r2.close_ms - (r2.request_ms + 1000.0)).abs() < 1e-9);
    }

    #[test]
    fn fresh_rejection_is_not_a_failure() {
        let mut msgs = vec![];
        for c in 1..=3 {
            msgs.push(msg(1, NodeKind::Vehicle, c, 40.0, if c == 2 { 400.0 } else { 100.0 }));
        }
        let s = stream(3, msgs);
        let mut oracle = OracleForecaster::default();
        let out = run_policy(&s, Policy::Predictive, &cfg(), Some(&mut oracle)).unwrap();
        assert!(out.cycles[1].missing.is_empty());
        assert!(out.cycles[1].correct.is_empty());
        assert_eq!(
            out.dispositions
                .iter()
                .filter(|d| matches!(d, Disposition::Discarded(DiscardReason::Freshness)))
                .count(),
            1
        );
    }
}
