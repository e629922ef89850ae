//! Baselines that fill each segment from a shared pool without checking
//! which cycle an update belongs to: FIFO and static priority.

use super::buffer::{NodeRegistry, Placement};
use super::{
    sequencing_latency, Action, AggregatorConfig, AggregatorError, Basis, ConnectionDecision, CycleRecord,
    DiscardReason, Disposition, EventStream, IssueReason, Policy, Recorder, RunOutcome,
};
use crate::kinematics::NodeKind;

/// Vehicles first, then fresher updates, then lower ids.
fn priority_key(p: &Placement) -> (u8, f64, u32) {
    let class = match p.kind {
        NodeKind::Vehicle => 0,
        NodeKind::Sensor => 1,
    };
    (class, p.aoi_ms, p.node)
}

fn by_priority(a: &Placement, b: &Placement) -> std::cmp::Ordering {
    let (ka, kb) = (priority_key(a), priority_key(b));
    ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.cmp(&kb.2))
}

pub(super) fn run(stream: &EventStream, policy: Policy, cfg: &AggregatorConfig) -> Result<RunOutcome, AggregatorError> {
    let priority = policy == Policy::Priority;
    let msgs = &stream.messages;
    let mut rec = Recorder::new(msgs.len());
    let mut registry = NodeRegistry::default();
    let mut pool: Vec<Placement> = Vec::new();
    let mut next = 0;
    let mut close_prev = f64::NEG_INFINITY;
    let mut records = Vec::with_capacity(stream.cycles as usize);

    // Moves one arrival into the pool, registering unknown sources.
    // Returns whether the source was new.
    let admit = |i: usize, c: u64, registry: &mut NodeRegistry, rec: &mut Recorder, pool: &mut Vec<Placement>| {
        let m = &msgs[i];
        let new = !registry.contains(m.source_id);
        if new {
            registry.insert(m.source_id, m.source_kind, cfg.period_for(m.source_kind));
            rec.decide(ConnectionDecision {
                node: m.source_id,
                action: Action::Initiate,
                decided_cycle: c,
                effective_cycle: c,
                basis: Basis::Measured,
                predicted_aoi: None,
            });
        }
        pool.push(Placement::from_message(m, Some(i)));
        new
    };

    for c in 1..=stream.cycles {
        let request = stream.request_time(c);
        let open = request.max(close_prev);
        let mut processed = 0;
        let decisions_before = rec.decisions.len();
        while next < msgs.len() && msgs[next].arrival() < open {
            admit(next, c, &mut registry, &mut rec, &mut pool);
            next += 1;
            processed += 1;
        }

        // Updates too old for any segment still in history are dropped.
        let floor = c.saturating_sub(cfg.history_depth);
        pool.retain(|p| {
            if p.msg_cycle < floor {
                let i = p.index.expect("pool entries carry their index");
                rec.dispositions[i] = Disposition::Discarded(DiscardReason::Stale);
                rec.issue(p.node, c, p.msg_cycle, open, IssueReason::Stale);
                rec.event(c, Some(p.node), "stale", None, p.msg_cycle as i64 - c as i64, 0.0);
                false
            } else {
                true
            }
        });

        let expected = registry.expected();
        // An empty registry takes everything that arrives before the deadline.
        let mut capacity = if expected.is_empty() {
            usize::MAX
        } else {
            expected.len()
        };
        let deadline = request + cfg.deadline_ms;
        let mut placed: Vec<Placement> = Vec::new();
        let mut close = open;
        let take = |pool: &mut Vec<Placement>| -> Option<Placement> {
            if pool.is_empty() {
                return None;
            }
            if priority {
                let best = (0..pool.len()).min_by(|&a, &b| by_priority(&pool[a], &pool[b]))?;
                Some(pool.remove(best))
            } else {
                Some(pool.remove(0))
            }
        };
        while placed.len() < capacity {
            if let Some(p) = take(&mut pool) {
                close = close.max(p.arrival_ms);
                placed.push(p);
                continue;
            }
            if next >= msgs.len() || msgs[next].arrival() > deadline {
                close = close.max(deadline);
                break;
            }
            // A node joining mid-fill brings its own slot.
            if admit(next, c, &mut registry, &mut rec, &mut pool) {
                capacity = capacity.saturating_add(1);
            }
            next += 1;
            processed += 1;
        }
        if priority {
            placed.sort_by(by_priority);
        }

        for p in &placed {
            let i = p.index.expect("pool entries carry their index");
            rec.dispositions[i] = Disposition::Placed { segment: c };
            let offset = p.msg_cycle as i64 - c as i64;
            rec.placement(c, p.node, c, offset, p.arrival_ms);
            if offset != 0 {
                rec.issue(p.node, c, p.msg_cycle, p.arrival_ms.max(open), IssueReason::Misplaced);
            }
        }
        let correct: Vec<_> = expected
            .iter()
            .copied()
            .filter(|&n| placed.iter().any(|p| p.node == n && p.msg_cycle == c))
            .collect();
        let missing: Vec<_> = expected.iter().copied().filter(|n| !correct.contains(n)).collect();
        for &n in &missing {
            rec.event(c, Some(n), "missing", Some(c), 0, close - request);
        }
        for &n in &expected {
            let heard = placed.iter().any(|p| p.node == n) || pool.iter().any(|p| p.node == n);
            let Some(entry) = registry.get_mut(n) else { continue };
            if heard {
                entry.misses = 0;
                continue;
            }
            entry.misses += 1;
            if entry.misses >= cfg.link_timeout_cycles {
                registry.remove(n);
                rec.decide(ConnectionDecision {
                    node: n,
                    action: Action::Terminate,
                    decided_cycle: c,
                    effective_cycle: c + 1,
                    basis: Basis::LinkLoss,
                    predicted_aoi: None,
                });
            }
        }
        let decisions = rec.decisions.len() - decisions_before;

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
            prediction_ms: 0.0,
            processed,
            placed,
            max_aoi_observed,
            ego_speed: stream.ego_speed_at(c),
        });
        rec.close_segment(c, close);
        rec.event(c, None, "close", Some(c), 0, close - request);
        close_prev = close;
    }

    Ok(RunOutcome {
        policy,
        stream_hash: stream.hash(),
        cycles: records,
        issues: rec.issues,
        decisions: rec.decisions,
        log: rec.log,
        dispositions: rec.dispositions,
        prediction_invocations: 0,
    })
}
