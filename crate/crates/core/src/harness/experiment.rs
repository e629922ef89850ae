use std::path::Path;

use super::{generate_stream, HarnessError, Scenario};
use crate::aggregator::{
    run_policy, Disposition, EventStream, Forecaster, ModelBank, OracleForecaster, Policy, RunOutcome,
};
use crate::kinematics::NodeKind;
use crate::metrics::{compare_policies, report_from_outcome, ComparisonTable, RunReport};
use crate::predictor::{
    evaluate, load_model, make_dataset, save_model, train, DatasetSpec, EvalReport, PredictorKind, PredictorModel,
};

/// Where the predictive policy gets its forecasts.
#[derive(Debug, Clone)]
pub enum ForecastSource {
    Models(ModelBank),
    /// Reads the future from the run's own trace.
    Oracle,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub report: RunReport,
    pub outcome: RunOutcome,
}

/// Replays one stream under one policy and summarizes it.
pub fn run_on_stream(
    scenario: &Scenario,
    stream: &EventStream,
    policy: Policy,
    seed: u64,
    forecast: Option<&ForecastSource>,
) -> Result<Experiment, HarnessError> {
    let cfg = scenario.aggregator_config();
    let outcome = match (policy, forecast) {
        (Policy::Predictive, Some(ForecastSource::Models(bank))) => {
            let mut bank = bank.clone();
            run_policy(stream, policy, &cfg, Some(&mut bank as &mut dyn Forecaster))?
        }
        (Policy::Predictive, Some(ForecastSource::Oracle)) => {
            let mut oracle = OracleForecaster::from_trace(&stream.trace);
            run_policy(stream, policy, &cfg, Some(&mut oracle as &mut dyn Forecaster))?
        }
        _ => run_policy(stream, policy, &cfg, None)?,
    };
    let received: Vec<f64> = stream
        .messages
        .iter()
        .zip(&outcome.dispositions)
        .filter(|(_, d)| **d != Disposition::Unprocessed)
        .map(|(m, _)| m.aoi_ms())
        .collect();
    let report = report_from_outcome(
        &outcome,
        &received,
        cfg.max_aoi_ms,
        seed,
        &scenario.fingerprint(),
        scenario.aggregator.dssr_denominator,
    )?;
    Ok(Experiment { report, outcome })
}

/// Simulates the scenario with `seed` and runs `policy` over it.
pub fn run_experiment(
    scenario: &Scenario,
    policy: Policy,
    seed: u64,
    forecast: Option<&ForecastSource>,
) -> Result<(EventStream, Experiment), HarnessError> {
    let stream = generate_stream(scenario, seed, scenario.duration_ms)?;
    let exp = run_on_stream(scenario, &stream, policy, seed, forecast)?;
    Ok((stream, exp))
}

/// One `(speed, seed)` cell: every policy replayed the stream with this hash.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepCell {
    pub speed_mps: f64,
    pub seed: u64,
    pub policy: String,
    pub stream_hash: String,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub reports: Vec<RunReport>,
    pub cells: Vec<SweepCell>,
    pub table: ComparisonTable,
}

/// Every speed and seed, with all policies sharing one stream per cell.
pub fn sweep(
    scenario: &Scenario,
    speeds: &[f64],
    policies: &[Policy],
    seeds: &[u64],
    forecast: Option<&ForecastSource>,
) -> Result<SweepResult, HarnessError> {
    if speeds.is_empty() || policies.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Scenario(
            "sweep needs at least one speed, policy and seed".into(),
        ));
    }
    let jobs: Vec<(f64, u64)> = speeds
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run_cell = |&(speed, seed): &(f64, u64)| -> Result<Vec<(SweepCell, RunReport)>, HarnessError> {
        let sc = scenario.with_constant_speed(speed);
        let stream = generate_stream(&sc, seed, sc.duration_ms)?;
        let hash = stream.hash();
        policies
            .iter()
            .map(|&p| {
                let exp = run_on_stream(&sc, &stream, p, seed, forecast)?;
                let cell = SweepCell {
                    speed_mps: speed,
                    seed,
                    policy: p.as_str().to_string(),
                    stream_hash: exp.outcome.stream_hash.clone(),
                };
                debug_assert_eq!(cell.stream_hash, hash);
                Ok((cell, exp.report))
            })
            .collect()
    };
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run_cell).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = jobs.iter().map(run_cell).collect();

    let mut cells = Vec::new();
    let mut reports = Vec::new();
    for r in results {
        for (cell, report) in r? {
            cells.push(cell);
            reports.push(report);
        }
    }
    let table = compare_policies(&reports)?;
    Ok(SweepResult { reports, cells, table })
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub node_kind: NodeKind,
    pub model: PredictorModel,
    pub eval: EvalReport,
    pub train_rows: usize,
    pub test_rows: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace_rows: usize,
    pub models: Vec<TrainedModel>,
}

impl TrainOutcome {
    pub fn bank(&self, initial_latency_ms: f64) -> ModelBank {
        let mut bank = ModelBank::new(initial_latency_ms);
        for m in &self.models {
            bank.insert(m.node_kind, m.model.clone());
        }
        bank
    }
}

/// Simulates a policy-free trace, then trains and evaluates one model per
/// node kind present in the roster, each forecasting its kind's period ahead.
pub fn train_pipeline(scenario: &Scenario, kind: PredictorKind, seed: u64) -> Result<TrainOutcome, HarnessError> {
    let duration = scenario.predictor.training_duration_ms.unwrap_or(scenario.duration_ms);
    let stream = generate_stream(scenario, seed, duration)?;
    let (sensor_period, vehicle_period) = scenario.periods();
    let p = &scenario.predictor;
    let mut models = Vec::new();
    for (node_kind, horizon) in [(NodeKind::Sensor, sensor_period), (NodeKind::Vehicle, vehicle_period)] {
        if !scenario.nodes.iter().any(|n| n.kind == node_kind) {
            continue;
        }
        let spec = DatasetSpec {
            node_kind: Some(node_kind),
            ..DatasetSpec::new(p.window, horizon)
        };
        let ds = make_dataset(&stream.trace, &spec)?;
        let model = train(kind, &ds, &p.recurrent, &p.forest, seed)?;
        let eval = evaluate(&model, &ds.test, p.tolerance)?;
        models.push(TrainedModel {
            node_kind,
            model,
            eval,
            train_rows: ds.train_rows,
            test_rows: ds.test_rows,
        });
    }
    Ok(TrainOutcome {
        trace_rows: stream.trace.len(),
        models,
    })
}

pub fn model_file_name(kind: PredictorKind, node_kind: NodeKind, horizon: usize) -> String {
    format!("{kind}-{node_kind}-h{horizon}.model")
}

pub fn save_models(outcome: &TrainOutcome, dir: &Path) -> Result<Vec<std::path::PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths = Vec::new();
    for m in &outcome.models {
        let path = dir.join(model_file_name(m.model.kind, m.node_kind, m.model.horizon));
        save_model(&m.model, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads the models a scenario needs; `None` when any file is missing.
pub fn load_models(scenario: &Scenario, kind: PredictorKind, dir: &Path) -> Result<Option<ModelBank>, HarnessError> {
    let (sp, vp) = scenario.periods();
    let mut bank = ModelBank::new(scenario.predictor.l_pred_ms);
    for (node_kind, horizon) in [(NodeKind::Sensor, sp), (NodeKind::Vehicle, vp)] {
        if !scenario.nodes.iter().any(|n| n.kind == node_kind) {
            continue;
        }
        let path = dir.join(model_file_name(kind, node_kind, horizon));
        if !path.exists() {
            return Ok(None);
        }
        let model = load_model(&path)?;
        if model.window != scenario.predictor.window {
            return Ok(None);
        }
        bank.insert(node_kind, model);
    }
    Ok(Some(bank))
}
