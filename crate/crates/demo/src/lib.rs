//! Browser bindings for the simulator. Every entry point returns JSON so the
//! page stays free of generated type glue; the `*_json` functions are plain
//! Rust and run natively in tests.

use std::collections::BTreeMap;

use aoi_core::aggregator::Policy;
use aoi_core::harness::{generate_stream, sweep, ForecastSource, Scenario};
use aoi_core::kinematics::NodeKind;
use aoi_core::predictor::choose_period;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const DEFAULT_SCENARIO: &str = include_str!("../../core/scenarios/default.toml");

/// Longest run the page may request, to keep the tab responsive.
const MAX_DURATION_MS: f64 = 120_000.0;

fn scenario(speed: f64, duration_ms: f64) -> Result<Scenario, String> {
    if !(speed.is_finite() && speed >= 0.0) {
        return Err(format!("speed must be a non-negative number, got {speed}"));
    }
    if !(duration_ms > 0.0 && duration_ms <= MAX_DURATION_MS) {
        return Err(format!(
            "duration must be in (0, {MAX_DURATION_MS}] ms, got {duration_ms}"
        ));
    }
    let mut sc = Scenario::from_toml(DEFAULT_SCENARIO).map_err(|e| e.to_string())?;
    sc.duration_ms = duration_ms;
    Ok(sc.with_constant_speed(speed))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct PeriodJson {
    period: usize,
    lower: f64,
    upper: f64,
    empty_interval: bool,
}

pub fn choose_period_json(l_pred_ms: f64, q: f64, scar: f64, n_max: u32) -> Result<String, String> {
    if !(q > 0.0) || !(l_pred_ms >= 0.0) || !(scar >= 0.0) {
        return Err("q must be positive; l_pred and scar must be >= 0".into());
    }
    let c = choose_period(l_pred_ms, q, scar, n_max as usize);
    to_json(&PeriodJson {
        period: c.period,
        lower: c.lower,
        upper: c.upper,
        empty_interval: c.empty_interval,
    })
}

#[derive(Serialize)]
struct PolicyJson {
    policy: String,
    dssr_pct: f64,
    latency_ms: f64,
    sequencing_ms: f64,
    connection_ms: f64,
    prediction_ms: f64,
    aoi_ok_pct: f64,
}

/// All four policies replay one stream at a constant ego speed. The
/// predictive policy reads the stream's own future in place of a model.
pub fn compare_policies_json(speed: f64, seed: u64, duration_ms: f64) -> Result<String, String> {
    let sc = scenario(speed, duration_ms)?;
    let result =
        sweep(&sc, &[speed], &Policy::ALL, &[seed], Some(&ForecastSource::Oracle)).map_err(|e| e.to_string())?;
    let rows: Vec<PolicyJson> = result
        .reports
        .iter()
        .map(|r| PolicyJson {
            policy: r.policy.clone(),
            dssr_pct: r.mean_dssr,
            latency_ms: r.mean_latency,
            sequencing_ms: r.mean_sequencing,
            connection_ms: r.mean_connection,
            prediction_ms: r.mean_prediction,
            aoi_ok_pct: r.aoi_satisfaction,
        })
        .collect();
    to_json(&rows)
}

#[derive(Serialize)]
struct NodeTrace {
    node: u32,
    kind: &'static str,
    /// `[time_ms, aoi_ms]` for every delivered update.
    points: Vec<[f64; 2]>,
}

#[derive(Serialize)]
struct TraceJson {
    max_aoi_ms: f64,
    nodes: Vec<NodeTrace>,
}

/// Per-node AoI over time for the bundled roster at a constant speed.
pub fn aoi_trace_json(speed: f64, seed: u64, duration_ms: f64) -> Result<String, String> {
    let sc = scenario(speed, duration_ms)?;
    let stream = generate_stream(&sc, seed, sc.duration_ms).map_err(|e| e.to_string())?;
    let mut nodes: BTreeMap<u32, NodeTrace> = BTreeMap::new();
    for row in &stream.trace {
        let entry = nodes.entry(row.node_id).or_insert_with(|| NodeTrace {
            node: row.node_id,
            kind: match row.kind {
                NodeKind::Sensor => "sensor",
                NodeKind::Vehicle => "vehicle",
            },
            points: Vec::new(),
        });
        if let (true, Some(aoi)) = (row.delivered, row.aoi_ms) {
            entry.points.push([row.time_ms, aoi]);
        }
    }
    to_json(&TraceJson {
        max_aoi_ms: 1000.0 / sc.q,
        nodes: nodes.into_values().filter(|n| !n.points.is_empty()).collect(),
    })
}

#[wasm_bindgen(js_name = choosePeriod)]
pub fn choose_period_js(l_pred_ms: f64, q: f64, scar: f64, n_max: u32) -> Result<String, JsValue> {
    choose_period_json(l_pred_ms, q, scar, n_max).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = comparePolicies)]
pub fn compare_policies_js(speed: f64, seed: u32, duration_ms: f64) -> Result<String, JsValue> {
    compare_policies_json(speed, u64::from(seed), duration_ms).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = aoiTrace)]
pub fn aoi_trace_js(speed: f64, seed: u32, duration_ms: f64) -> Result<String, JsValue> {
    aoi_trace_json(speed, u64::from(seed), duration_ms).map_err(|e| JsValue::from_str(&e))
}
