//! Scenario files, end-to-end runs, speed sweeps, training and report output.

mod experiment;
mod plot;
mod scenario;
mod simulate;

pub use experiment::{
    load_models, model_file_name, run_experiment, run_on_stream, save_models, sweep, train_pipeline, Experiment,
    ForecastSource, SweepCell, SweepResult, TrainOutcome, TrainedModel,
};
pub use plot::{emit_plots, line_chart, stacked_bars, Series};
pub use scenario::{
    parse_scenario, AggregatorSpec, EgoSpec, MobilitySpec, NodeSpec, PeriodMode, PredictorSpec, Sawtooth, Scenario,
};
pub use simulate::generate_stream;

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use thiserror::Error;

use crate::aggregator::{write_event_log, AggregatorError, EventStream, RunOutcome};
use crate::channel::{write_trace, ChannelError};
use crate::metrics::{write_comparison_csv, write_report_csv, MetricsError, RunReport};
use crate::predictor::PredictorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("plot: {0}")]
    Plot(String),
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Writes `trace.csv`, `events.csv` and `report.csv` for one run.
pub fn write_run_outputs(
    dir: &Path,
    stream: &EventStream,
    outcome: &RunOutcome,
    report: &RunReport,
    timestamp: &str,
) -> Result<(), HarnessError> {
    write_trace(&stream.trace, create(&dir.join("trace.csv"))?)?;
    write_event_log(&outcome.log, create(&dir.join("events.csv"))?)?;
    write_report_csv(
        std::slice::from_ref(report),
        timestamp,
        create(&dir.join("report.csv"))?,
    )?;
    Ok(())
}

/// Writes `report.csv`, `comparison.csv` and the per-cell stream hashes.
pub fn write_sweep_outputs(dir: &Path, result: &SweepResult, timestamp: &str) -> Result<(), HarnessError> {
    write_report_csv(&result.reports, timestamp, create(&dir.join("report.csv"))?)?;
    write_comparison_csv(&result.table, timestamp, create(&dir.join("comparison.csv"))?)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("cells.csv"))?);
    for c in &result.cells {
        w.serialize(c).map_err(MetricsError::from)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: dir.join("cells.csv").display().to_string(),
        source,
    })?;
    Ok(())
}
