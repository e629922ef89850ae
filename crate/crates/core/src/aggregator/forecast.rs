use std::collections::BTreeMap;

use super::AggregatorError;
use crate::channel::{TraceRow, UpdateMessage};
use crate::kinematics::{NodeId, NodeKind};
use crate::predictor::{predict_n_step, FeatureWindow, LatencyEstimator, PredictorModel, WindowEntry};

/// Source of `horizon`-step-ahead AoI forecasts for the predictive policy.
pub trait Forecaster {
    /// AoI expected at cycle `last_cycle + horizon`.
    fn forecast(
        &mut self,
        node: NodeId,
        kind: NodeKind,
        window: &FeatureWindow,
        last_cycle: u64,
        horizon: usize,
    ) -> Result<f64, AggregatorError>;
}

/// Trained models keyed by `(node kind, horizon)`.
#[derive(Debug, Clone, Default)]
pub struct ModelBank {
    models: BTreeMap<(NodeKind, usize), PredictorModel>,
    pub latency: LatencyEstimator,
}

impl ModelBank {
    pub fn new(initial_latency_ms: f64) -> Self {
        Self {
            models: BTreeMap::new(),
            latency: LatencyEstimator::new(initial_latency_ms),
        }
    }

    pub fn insert(&mut self, kind: NodeKind, model: PredictorModel) {
        self.models.insert((kind, model.horizon), model);
    }

    pub fn get(&self, kind: NodeKind, horizon: usize) -> Option<&PredictorModel> {
        self.models.get(&(kind, horizon))
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

impl Forecaster for ModelBank {
    fn forecast(
        &mut self,
        _node: NodeId,
        kind: NodeKind,
        window: &FeatureWindow,
        _last_cycle: u64,
        horizon: usize,
    ) -> Result<f64, AggregatorError> {
        let model = self
            .models
            .get(&(kind, horizon))
            .ok_or(AggregatorError::MissingModel { kind, horizon })?;
        let p = predict_n_step(model, window, horizon)
            .map_err(|source| AggregatorError::Prediction { cycle: 0, source })?;
        if let Some(l) = p.latency_ms {
            self.latency.observe(l);
        }
        Ok(p.aoi_ms)
    }
}

/// Answers with the true future AoI taken from the run's trace.
#[derive(Debug, Clone, Default)]
pub struct OracleForecaster {
    truth: BTreeMap<NodeId, BTreeMap<u64, Option<f64>>>,
}

impl OracleForecaster {
    pub fn from_trace(rows: &[TraceRow]) -> Self {
        let mut truth: BTreeMap<NodeId, BTreeMap<u64, Option<f64>>> = BTreeMap::new();
        for r in rows {
            truth.entry(r.node_id).or_default().insert(r.cycle, r.aoi_ms);
        }
        Self { truth }
    }
}

impl Forecaster for OracleForecaster {
    fn forecast(
        &mut self,
        node: NodeId,
        _kind: NodeKind,
        _window: &FeatureWindow,
        last_cycle: u64,
        horizon: usize,
    ) -> Result<f64, AggregatorError> {
        let target = last_cycle + horizon as u64;
        let Some(rows) = self.truth.get(&node) else {
            return Ok(f64::INFINITY);
        };
        // Past the end of the run, fall back to the latest known row.
        let value = rows.range(..=target).next_back().and_then(|(_, v)| *v);
        Ok(value.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HistoryRow {
    request_ms: f64,
    arrival_ms: f64,
    aoi_ms: f64,
    relative_speed: f64,
}

/// Everything the ego has heard from each node, for building feature windows.
#[derive(Debug, Clone, Default)]
pub struct NodeHistory {
    rows: BTreeMap<NodeId, BTreeMap<u64, HistoryRow>>,
}

impl NodeHistory {
    pub fn record(&mut self, msg: &UpdateMessage) {
        self.rows.entry(msg.source_id).or_default().insert(
            msg.cycle,
            HistoryRow {
                request_ms: msg.requested_at,
                arrival_ms: msg.arrival(),
                aoi_ms: msg.aoi_ms(),
                relative_speed: msg.relative_speed,
            },
        );
    }

    /// The last `w` updates of the node's current contact episode that had
    /// arrived by `now`, with the cycle of the newest one.
    pub fn window(&self, node: NodeId, now: f64, w: usize) -> Option<(FeatureWindow, u64)> {
        let rows = self.rows.get(&node)?;
        let mut run: Vec<(u64, &HistoryRow)> = Vec::new();
        for (&c, r) in rows.iter().rev() {
            if r.arrival_ms > now {
                if run.is_empty() {
                    continue;
                }
                break;
            }
            if let Some(&(prev, _)) = run.last() {
                if prev != c + 1 {
                    break;
                }
            }
            run.push((c, r));
        }
        if run.len() < w {
            return None;
        }
        let start = run.last()?.1.request_ms;
        let last_cycle = run[0].0;
        let entries = run[..w]
            .iter()
            .rev()
            .map(|(_, r)| WindowEntry {
                timestamp_ms: r.request_ms - start,
                relative_speed: r.relative_speed,
                aoi_ms: r.aoi_ms,
            })
            .collect();
        FeatureWindow::new(entries).ok().map(|f| (f, last_cycle))
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::msg;
    use super::*;

    #[test]
    fn window_uses_current_episode_only() {
        let mut h = NodeHistory::default();
        for c in [1, 2, 3, 5, 6, 7, 8] {
            h.record(&msg(1, NodeKind::Sensor, c, 40.0, 100.0 + c as f64));
        }
        let now = 10_000.0;
        assert!(h.window(1, now, 5).is_none());
        let (w, last) = h.window(1, now, 4).unwrap();
        assert_eq!(last, 8);
        assert_eq!(w.entries()[0].timestamp_ms, 0.0);
        assert_eq!(w.last().aoi_ms, 108.0);
    }

    #[test]
    fn window_ignores_unarrived_updates() {
        let mut h = NodeHistory::default();
        for c in 1..=4 {
            h.record(&msg(1, NodeKind::Sensor, c, 40.0, 100.0));
        }
        // Cycle 4 is requested at 1000 ms and lands at 1040 ms.
        let (_, last) = h.window(1, 1020.0, 3).unwrap();
        assert_eq!(last, 3);
    }

    #[test]
    fn oracle_reads_future_truth() {
        let rows: Vec<TraceRow> = (1..=10)
            .map(|c| TraceRow {
                time_ms: 0.0,
                node_id: 4,
                cycle: c,
                aoi_ms: Some(c as f64 * 10.0),
                kind: NodeKind::Sensor,
                rel_speed_mps: 0.0,
                contact_ms: Some(0.0),
                delivered: true,
            })
            .collect();
        let mut o = OracleForecaster::from_trace(&rows);
        let w = FeatureWindow::new(vec![WindowEntry {
            timestamp_ms: 0.0,
            relative_speed: 0.0,
            aoi_ms: 0.0,
        }])
        .unwrap();
        assert_eq!(o.forecast(4, NodeKind::Sensor, &w, 3, 5).unwrap(), 80.0);
        assert_eq!(o.forecast(4, NodeKind::Sensor, &w, 9, 5).unwrap(), 100.0);
        assert!(o.forecast(9, NodeKind::Sensor, &w, 3, 5).unwrap().is_infinite());
    }
}
