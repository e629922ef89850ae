use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Action, Basis, ConnectionDecision, DiscardReason};
use crate::channel::UpdateMessage;
use crate::kinematics::{NodeId, NodeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub node: NodeId,
    pub kind: NodeKind,
    pub msg_cycle: u64,
    pub arrival_ms: f64,
    pub originated_at: f64,
    pub aoi_ms: f64,
    /// Placed after its segment had closed.
    pub late: bool,
    /// Index into the run's event stream, when it came from one.
    pub index: Option<usize>,
}

impl Placement {
    pub fn from_message(msg: &UpdateMessage, index: Option<usize>) -> Self {
        Self {
            node: msg.source_id,
            kind: msg.source_kind,
            msg_cycle: msg.cycle,
            arrival_ms: msg.arrival(),
            originated_at: msg.originated_at,
            aoi_ms: msg.aoi_ms(),
            late: false,
            index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Segment {
    pub cycle: u64,
    pub placed: Vec<Placement>,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlacementOutcome {
    Placed {
        segment: u64,
    },
    /// Held for a later segment; `offset = msg.cycle - current`.
    Parked {
        offset: i64,
    },
    PlacedLate {
        segment: u64,
        offset: i64,
    },
    Stale {
        offset: i64,
    },
    Discarded(DiscardReason),
}

/// Data buffer `B` and the per-cycle segments `U^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateBuffer {
    pub current_cycle: u64,
    pub history_depth: u64,
    /// Accepted updates as `(node, cycle)` in arrival order.
    pub data: Vec<(NodeId, u64)>,
    segments: BTreeMap<u64, Segment>,
    parked: BTreeMap<u64, Vec<Placement>>,
}

impl UpdateBuffer {
    pub fn new(history_depth: u64) -> Self {
        Self {
            current_cycle: 0,
            history_depth,
            data: Vec::new(),
            segments: BTreeMap::new(),
            parked: BTreeMap::new(),
        }
    }

    /// Makes `cycle` current and hands back the updates parked for it; the
    /// caller re-places those it still accepts.
    pub fn open(&mut self, cycle: u64) -> Vec<Placement> {
        self.current_cycle = cycle;
        self.segments.entry(cycle).or_insert_with(|| Segment {
            cycle,
            ..Segment::default()
        });
        let parked = self.parked.remove(&cycle).unwrap_or_default();
        // Parked updates were already counted into `data` on arrival.
        for p in &parked {
            if let Some(pos) = self.data.iter().rposition(|&(n, c)| n == p.node && c == p.msg_cycle) {
                self.data.remove(pos);
            }
        }
        parked
    }

    /// Routes an update relative to the current segment.
    pub fn place(&mut self, mut p: Placement) -> PlacementOutcome {
        let cur = self.current_cycle;
        let offset = p.msg_cycle as i64 - cur as i64;
        if p.msg_cycle == cur {
            self.data.push((p.node, p.msg_cycle));
            self.segments
                .entry(cur)
                .or_insert_with(|| Segment {
                    cycle: cur,
                    ..Segment::default()
                })
                .placed
                .push(p);
            return PlacementOutcome::Placed { segment: cur };
        }
        if p.msg_cycle > cur {
            self.data.push((p.node, p.msg_cycle));
            self.parked.entry(p.msg_cycle).or_default().push(p);
            return PlacementOutcome::Parked { offset };
        }
        if cur - p.msg_cycle <= self.history_depth {
            if let Some(seg) = self.segments.get_mut(&p.msg_cycle) {
                self.data.push((p.node, p.msg_cycle));
                p.late = true;
                let segment = seg.cycle;
                seg.placed.push(p);
                return PlacementOutcome::PlacedLate { segment, offset };
            }
        }
        PlacementOutcome::Stale { offset }
    }

    pub fn close(&mut self, cycle: u64) {
        if let Some(s) = self.segments.get_mut(&cycle) {
            s.closed = true;
        }
        // Segments beyond the history window are frozen and no longer needed.
        let keep_from = cycle.saturating_sub(self.history_depth);
        self.segments.retain(|&c, _| c >= keep_from);
    }

    pub fn segment(&self, cycle: u64) -> Option<&Segment> {
        self.segments.get(&cycle)
    }

    /// Whether `node`'s own cycle-`cycle` update sits on time in segment `cycle`.
    pub fn has_on_time(&self, node: NodeId, cycle: u64) -> bool {
        self.segments.get(&cycle).is_some_and(|s| {
            s.placed
                .iter()
                .any(|p| p.node == node && p.msg_cycle == cycle && !p.late)
        })
    }

    pub fn parked_count(&self) -> usize {
        self.parked.values().map(Vec::len).sum()
    }

    pub fn drain_parked(&mut self) -> Vec<Placement> {
        std::mem::take(&mut self.parked).into_values().flatten().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub kind: NodeKind,
    pub action: Action,
    /// Cycle at which a pending termination removes the node.
    pub terminate_at: Option<u64>,
    pub misses: u32,
    pub period: usize,
    pub last_prediction: Option<f64>,
}

/// Nodes the ego currently aggregates (`S ∪ V` as known to it).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeRegistry {
    entries: BTreeMap<NodeId, RegistryEntry>,
}

impl NodeRegistry {
    pub fn contains(&self, node: NodeId) -> bool {
        self.entries.contains_key(&node)
    }

    pub fn get(&self, node: NodeId) -> Option<&RegistryEntry> {
        self.entries.get(&node)
    }

    pub fn get_mut(&mut self, node: NodeId) -> Option<&mut RegistryEntry> {
        self.entries.get_mut(&node)
    }

    pub fn insert(&mut self, node: NodeId, kind: NodeKind, period: usize) {
        self.entries.insert(
            node,
            RegistryEntry {
                kind,
                action: Action::Initiate,
                terminate_at: None,
                misses: 0,
                period,
                last_prediction: None,
            },
        );
    }

    pub fn remove(&mut self, node: NodeId) -> Option<RegistryEntry> {
        self.entries.remove(&node)
    }

    pub fn active(&self) -> impl Iterator<Item = (NodeId, &RegistryEntry)> {
        self.entries.iter().map(|(&id, e)| (id, e))
    }

    /// Members whose last decision was Initiate or Maintain.
    pub fn expected(&self) -> Vec<NodeId> {
        self.entries
            .iter()
            .filter(|(_, e)| e.terminate_at.is_none() && e.action != Action::Terminate)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Admission check for an update from an unknown source.
pub fn admit_new_node(
    msg: &UpdateMessage,
    max_aoi: f64,
    cycle: u64,
    period: usize,
    registry: &mut NodeRegistry,
) -> Option<ConnectionDecision> {
    if msg.aoi_ms() > max_aoi {
        return None;
    }
    registry.insert(msg.source_id, msg.source_kind, period);
    Some(ConnectionDecision {
        node: msg.source_id,
        action: Action::Initiate,
        decided_cycle: cycle,
        effective_cycle: cycle,
        basis: Basis::Measured,
        predicted_aoi: None,
    })
}

/// Freshness check and placement of an update from an active source.
pub fn on_update(
    msg: &UpdateMessage,
    index: Option<usize>,
    buffer: &mut UpdateBuffer,
    max_aoi: f64,
) -> PlacementOutcome {
    if msg.aoi_ms() > max_aoi {
        return PlacementOutcome::Discarded(DiscardReason::Freshness);
    }
    buffer.place(Placement::from_message(msg, index))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::msg;
    use super::*;

    #[test]
    fn admission_threshold_is_inclusive() {
        let mut reg = NodeRegistry::default();
        let max = 1000.0 / 3.0;
        assert!(admit_new_node(&msg(1, NodeKind::Sensor, 1, 40.0, 200.0), max, 1, 5, &mut reg).is_some());
        assert!(admit_new_node(&msg(2, NodeKind::Sensor, 1, 40.0, max), max, 1, 5, &mut reg).is_some());
        assert!(admit_new_node(&msg(3, NodeKind::Sensor, 1, 40.0, 400.0), max, 1, 5, &mut reg).is_none());
        assert!(reg.contains(1) && reg.contains(2) && !reg.contains(3));
        assert_eq!(reg.get(1).unwrap().action, Action::Initiate);
    }

    #[test]
    fn placement_offsets() {
        let mut b = UpdateBuffer::new(2);
        b.open(1);
        b.close(1);
        b.open(2);
        let on = on_update(&msg(1, NodeKind::Sensor, 2, 40.0, 100.0), None, &mut b, 333.0);
        assert_eq!(on, PlacementOutcome::Placed { segment: 2 });
        let late = on_update(&msg(2, NodeKind::Sensor, 1, 400.0, 100.0), None, &mut b, 333.0);
        assert_eq!(late, PlacementOutcome::PlacedLate { segment: 1, offset: -1 });
        let early = on_update(&msg(3, NodeKind::Vehicle, 3, 40.0, 100.0), None, &mut b, 333.0);
        assert_eq!(early, PlacementOutcome::Parked { offset: 1 });
        let fresh = on_update(&msg(4, NodeKind::Vehicle, 2, 40.0, 500.0), None, &mut b, 333.0);
        assert_eq!(fresh, PlacementOutcome::Discarded(DiscardReason::Freshness));
        b.close(2);
        let moved = b.open(3);
        assert_eq!(moved.len(), 1);
        assert_eq!(b.place(moved[0].clone()), PlacementOutcome::Placed { segment: 3 });
        assert!(b.has_on_time(3, 3));
    }

    #[test]
    fn frozen_segments_reject() {
        let mut b = UpdateBuffer::new(2);
        for c in 1..=4 {
            b.open(c);
            b.close(c);
        }
        b.open(5);
        let out = b.place(Placement::from_message(&msg(1, NodeKind::Sensor, 2, 0.0, 10.0), None));
        assert_eq!(out, PlacementOutcome::Stale { offset: -3 });
        let ok = b.place(Placement::from_message(&msg(1, NodeKind::Sensor, 3, 0.0, 10.0), None));
        assert_eq!(ok, PlacementOutcome::PlacedLate { segment: 3, offset: -2 });
    }
}
