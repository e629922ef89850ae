use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Example, FeatureWindow, PredictorError, WindowEntry};
use crate::channel::TraceRow;
use crate::kinematics::{NodeId, NodeKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub window: usize,
    pub horizon: usize,
    /// Chronological split ratio `train_parts : test_parts` over rows.
    pub train_parts: usize,
    pub test_parts: usize,
    /// Restrict to one node kind (one model per kind).
    pub node_kind: Option<NodeKind>,
}

impl DatasetSpec {
    pub fn new(window: usize, horizon: usize) -> Self {
        Self {
            window,
            horizon,
            train_parts: 8,
            test_parts: 1,
            node_kind: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub window: usize,
    pub horizon: usize,
    pub node_kind: Option<NodeKind>,
    /// Trace rows (timestamps) on each side of the split.
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Sorts rows by time and cuts them `train_parts : test_parts`.
pub fn split_chronological(rows: &[TraceRow], train_parts: usize, test_parts: usize) -> (Vec<TraceRow>, Vec<TraceRow>) {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.time_ms.total_cmp(&b.time_ms).then(a.node_id.cmp(&b.node_id)));
    let total = train_parts + test_parts;
    let cut = (sorted.len() * train_parts).checked_div(total).unwrap_or(sorted.len());
    let test = sorted.split_off(cut);
    (sorted, test)
}

/// Builds windowed examples inside each contact episode of each node.
///
/// A window is `window` consecutive delivered samples; its target is the AoI
/// recorded `horizon` cycles after the last of them, which may be a silent
/// cycle after the node left coverage.
pub fn windowed_examples(rows: &[TraceRow], window: usize, horizon: usize) -> Result<Vec<Example>, PredictorError> {
    if window == 0 {
        return Err(PredictorError::ZeroWindow);
    }
    if horizon == 0 {
        return Err(PredictorError::ZeroHorizon);
    }
    let mut by_node: BTreeMap<NodeId, Vec<&TraceRow>> = BTreeMap::new();
    for row in rows {
        by_node.entry(row.node_id).or_default().push(row);
    }
    let mut out = Vec::new();
    for (_, mut node_rows) in by_node {
        node_rows.sort_by_key(|r| r.cycle);
        for episode in episodes(&node_rows) {
            collect_episode(episode, window, horizon, &mut out);
        }
    }
    Ok(out)
}

fn episodes<'a>(rows: &[&'a TraceRow]) -> Vec<Vec<&'a TraceRow>> {
    let mut out: Vec<Vec<&TraceRow>> = Vec::new();
    let mut current: Vec<&TraceRow> = Vec::new();
    for &row in rows {
        let Some(contact) = row.contact_ms else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            continue;
        };
        let continues = current
            .last()
            .is_some_and(|prev| prev.cycle + 1 == row.cycle && prev.contact_ms.is_some_and(|c| contact > c));
        if !continues && !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
        current.push(row);
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn collect_episode(rows: Vec<&TraceRow>, window: usize, horizon: usize, out: &mut Vec<Example>) {
    if rows.len() < window + horizon {
        return;
    }
    for start in 0..=(rows.len() - window - horizon) {
        let slice = &rows[start..start + window];
        if !slice.iter().all(|r| r.delivered && r.aoi_ms.is_some()) {
            continue;
        }
        let Some(target) = rows[start + window - 1 + horizon].aoi_ms else {
            continue;
        };
        let entries = slice
            .iter()
            .map(|r| WindowEntry {
                timestamp_ms: r.contact_ms.unwrap_or_default(),
                relative_speed: r.rel_speed_mps,
                aoi_ms: r.aoi_ms.unwrap_or_default(),
            })
            .collect();
        if let Ok(window) = FeatureWindow::new(entries) {
            out.push(Example { window, target });
        }
    }
}

/// Splits the trace chronologically and windows each side.
pub fn make_dataset(rows: &[TraceRow], spec: &DatasetSpec) -> Result<Dataset, PredictorError> {
    if spec.window == 0 {
        return Err(PredictorError::ZeroWindow);
    }
    if spec.horizon == 0 {
        return Err(PredictorError::ZeroHorizon);
    }
    let filtered: Vec<TraceRow> = rows
        .iter()
        .filter(|r| spec.node_kind.is_none_or(|k| r.kind == k))
        .cloned()
        .collect();
    let needed = spec.window + spec.horizon;
    if filtered.len() < needed {
        return Err(PredictorError::TraceTooShort {
            len: filtered.len(),
            needed,
        });
    }
    let (train_rows, test_rows) = split_chronological(&filtered, spec.train_parts, spec.test_parts);
    let train = windowed_examples(&train_rows, spec.window, spec.horizon)?;
    let test = windowed_examples(&test_rows, spec.window, spec.horizon)?;
    Ok(Dataset {
        train,
        test,
        window: spec.window,
        horizon: spec.horizon,
        node_kind: spec.node_kind,
        train_rows: train_rows.len(),
        test_rows: test_rows.len(),
    })
}
