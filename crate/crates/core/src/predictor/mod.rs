//! AoI forecasting: per-kind models mapping a window of
//! `(contact time, relative speed, AoI)` samples to the AoI `N` cycles ahead.

mod cluster;
mod dataset;
mod eval;
mod forest;
mod linear;
mod lstm;
mod period;
mod persist;

pub use cluster::{cluster_nodes, Cluster};
pub use dataset::{make_dataset, split_chronological, windowed_examples, Dataset, DatasetSpec};
pub use eval::{evaluate, EvalReport};
pub use forest::{train_forest, ForestConfig, ForestModel, RegressionTree};
pub use linear::{train_linear, LinearModel};
pub use lstm::{
    gradient_check, train_recurrent, Activation, GradCheckOptions, GradCheckReport, Initializer, LayerShape, Loss,
    LstmNet, Optimizer, RecurrentNetConfig,
};
pub use period::{choose_period, invocation_count, LatencyEstimator, PeriodChoice};
pub use persist::{load_model, read_model, save_model, write_model, FORMAT_VERSION, MAGIC};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::NodeKind;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("prediction horizon must be >= 1")]
    ZeroHorizon,
    #[error("window size must be >= 1")]
    ZeroWindow,
    #[error("trace has {len} rows, needs at least window + horizon = {needed}")]
    TraceTooShort { len: usize, needed: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("window timestamps must be strictly increasing")]
    UnorderedWindow,
    #[error("window has {got} entries, model expects {expected}")]
    WindowMismatch { expected: usize, got: usize },
    #[error("model forecasts {trained} steps ahead, asked for {requested}")]
    HorizonMismatch { trained: usize, requested: usize },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("gradient check requires dropout and recurrent dropout disabled")]
    DropoutInGradientCheck,
    #[error("unknown predictor kind `{0}`")]
    UnknownKind(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Number of features carried by one window entry.
pub const ENTRY_FEATURES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    /// Milliseconds since the current contact with the node began.
    pub timestamp_ms: f64,
    pub relative_speed: f64,
    pub aoi_ms: f64,
}

impl WindowEntry {
    pub fn features(&self) -> [f64; ENTRY_FEATURES] {
        [self.timestamp_ms, self.relative_speed, self.aoi_ms]
    }
}

/// Consecutive history samples for one node, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    entries: Vec<WindowEntry>,
}

impl FeatureWindow {
    pub fn new(entries: Vec<WindowEntry>) -> Result<Self, PredictorError> {
        if entries.is_empty() {
            return Err(PredictorError::ZeroWindow);
        }
        if entries.windows(2).any(|p| !(p[1].timestamp_ms > p[0].timestamp_ms)) {
            return Err(PredictorError::UnorderedWindow);
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[WindowEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> &WindowEntry {
        self.entries.last().expect("windows are non-empty")
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.features()).collect()
    }
}

/// One supervised pair: a window and the AoI observed `horizon` cycles after
/// its last entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub window: FeatureWindow,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Linear,
    Recurrent,
    #[serde(rename = "forest")]
    TreeEnsemble,
}

impl PredictorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictorKind::Linear => "linear",
            PredictorKind::Recurrent => "recurrent",
            PredictorKind::TreeEnsemble => "forest",
        }
    }
}

impl std::fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PredictorKind {
    type Err = PredictorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(PredictorKind::Linear),
            "recurrent" | "lstm" => Ok(PredictorKind::Recurrent),
            "forest" | "random-forest" => Ok(PredictorKind::TreeEnsemble),
            other => Err(PredictorError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss before any update (MSE on the training set).
    pub initial_loss: f64,
    pub final_loss: f64,
    /// One entry per epoch for iterative trainers.
    pub loss_curve: Vec<f64>,
    pub parameter_count: usize,
    pub train_time_ms: f64,
    pub train_examples: usize,
}

/// Per-feature standardization fitted on training windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub feature_mean: [f64; ENTRY_FEATURES],
    pub feature_std: [f64; ENTRY_FEATURES],
    pub target_mean: f64,
    pub target_std: f64,
}

impl Scaler {
    pub fn identity() -> Self {
        Self {
            feature_mean: [0.0; ENTRY_FEATURES],
            feature_std: [1.0; ENTRY_FEATURES],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn fit(examples: &[Example]) -> Self {
        let mut sum = [0.0; ENTRY_FEATURES];
        let mut sq = [0.0; ENTRY_FEATURES];
        let mut n = 0.0;
        for ex in examples {
            for e in ex.window.entries() {
                for (k, v) in e.features().into_iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1.0;
            }
        }
        let mut feature_mean = [0.0; ENTRY_FEATURES];
        let mut feature_std = [1.0; ENTRY_FEATURES];
        if n > 0.0 {
            for k in 0..ENTRY_FEATURES {
                feature_mean[k] = sum[k] / n;
                let var = (sq[k] / n - feature_mean[k] * feature_mean[k]).max(0.0);
                feature_std[k] = if var > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
        let m = examples.len().max(1) as f64;
        let target_mean = examples.iter().map(|e| e.target).sum::<f64>() / m;
        let target_var = examples.iter().map(|e| (e.target - target_mean).powi(2)).sum::<f64>() / m;
        Self {
            feature_mean,
            feature_std,
            target_mean,
            target_std: if target_var > 1e-12 { target_var.sqrt() } else { 1.0 },
        }
    }

    pub fn scale_window(&self, window: &FeatureWindow) -> Vec<[f64; ENTRY_FEATURES]> {
        window
            .entries()
            .iter()
            .map(|e| {
                let f = e.features();
                std::array::from_fn(|k| (f[k] - self.feature_mean[k]) / self.feature_std[k])
            })
            .collect()
    }

    pub fn scale_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn unscale_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Linear(LinearModel),
    Recurrent(LstmNet),
    Forest(ForestModel),
}

/// A trained AoI forecaster for one `(node kind, horizon)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub kind: PredictorKind,
    pub node_kind: Option<NodeKind>,
    /// Window length the model consumes.
    pub window: usize,
    /// Steps ahead it forecasts; doubles as the node's prediction period.
    pub horizon: usize,
    pub params: ModelParams,
    pub train_report: TrainReport,
}

impl PredictorModel {
    pub fn period(&self) -> usize {
        self.horizon.max(1)
    }

    pub fn parameter_count(&self) -> usize {
        match &self.params {
            ModelParams::Linear(m) => m.parameter_count(),
            ModelParams::Recurrent(m) => m.parameter_count(),
            ModelParams::Forest(m) => m.parameter_count(),
        }
    }

    fn raw_predict(&self, window: &FeatureWindow) -> f64 {
        match &self.params {
            ModelParams::Linear(m) => m.predict(window),
            ModelParams::Recurrent(m) => m.predict(window),
            ModelParams::Forest(m) => m.predict(window),
        }
    }
}

/// A forecast plus the wall-clock time it took, when a clock is available.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub aoi_ms: f64,
    pub latency_ms: Option<f64>,
}

/// Forecasts the AoI `n` cycles after the window's last entry.
pub fn predict_n_step(model: &PredictorModel, window: &FeatureWindow, n: usize) -> Result<Prediction, PredictorError> {
    if n != model.horizon {
        return Err(PredictorError::HorizonMismatch {
            trained: model.horizon,
            requested: n,
        });
    }
    if window.len() != model.window {
        return Err(PredictorError::WindowMismatch {
            expected: model.window,
            got: window.len(),
        });
    }
    let watch = Stopwatch::start();
    let aoi_ms = model.raw_predict(window);
    Ok(Prediction {
        aoi_ms,
        latency_ms: watch.elapsed_ms(),
    })
}

pub fn train(
    kind: PredictorKind,
    dataset: &Dataset,
    recurrent: &RecurrentNetConfig,
    forest: &ForestConfig,
    seed: u64,
) -> Result<PredictorModel, PredictorError> {
    let mut model = match kind {
        PredictorKind::Linear => train_linear(dataset)?,
        PredictorKind::Recurrent => train_recurrent(dataset, recurrent, seed)?,
        PredictorKind::TreeEnsemble => train_forest(dataset, forest, seed)?,
    };
    model.node_kind = dataset.node_kind;
    Ok(model)
}

/// Wall-clock timer that degrades to `None` where no monotonic clock exists.
pub(crate) struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub(crate) fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub(crate) fn elapsed_ms(&self) -> Option<f64> {
        #[cfg(not(target_arch = "wasm32"))]
        {
            Some(self.start.elapsed().as_secs_f64() * 1000.0)
        }
        #[cfg(target_arch = "wasm32")]
        {
            None
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Examples with window length `w` whose target is `f(last speed)`.
    pub fn synthetic<F: Fn(f64) -> f64>(n: usize, w: usize, seed: u64, f: F) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let start: f64 = rng.gen_range(0.0..10_000.0);
                let entries = (0..w)
                    .map(|k| WindowEntry {
                        timestamp_ms: start + 333.0 * k as f64,
                        relative_speed: rng.gen_range(0.0..30.0),
                        aoi_ms: rng.gen_range(0.0..300.0),
                    })
                    .collect::<Vec<_>>();
                let speed = entries.last().unwrap().relative_speed;
                Example {
                    window: FeatureWindow::new(entries).unwrap(),
                    target: f(speed),
                }
            })
            .collect()
    }

    pub fn dataset(train: Vec<Example>, test: Vec<Example>, w: usize, horizon: usize) -> Dataset {
        Dataset {
            train,
            test,
            window: w,
            horizon,
            node_kind: None,
            train_rows: 0,
            test_rows: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn window_requires_increasing_timestamps() {
        let e = |t| WindowEntry {
            timestamp_ms: t,
            relative_speed: 1.0,
            aoi_ms: 1.0,
        };
        assert!(FeatureWindow::new(vec![e(0.0), e(1.0)]).is_ok());
        assert!(matches!(
            FeatureWindow::new(vec![e(1.0), e(1.0)]),
            Err(PredictorError::UnorderedWindow)
        ));
    }

    #[test]
    fn predict_checks_horizon_and_window() {
        let ex = synthetic(50, 2, 1, |v| 2.0 * v + 10.0);
        let model = train_linear(&dataset(ex.clone(), vec![], 2, 3)).unwrap();
        assert!(predict_n_step(&model, &ex[0].window, 3).is_ok());
        assert!(matches!(
            predict_n_step(&model, &ex[0].window, 2),
            Err(PredictorError::HorizonMismatch { .. })
        ));
        let short = synthetic(1, 1, 2, |v| v);
        assert!(matches!(
            predict_n_step(&model, &short[0].window, 3),
            Err(PredictorError::WindowMismatch { .. })
        ));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("linear".parse::<PredictorKind>().unwrap(), PredictorKind::Linear);
        assert_eq!("recurrent".parse::<PredictorKind>().unwrap(), PredictorKind::Recurrent);
        assert_eq!("forest".parse::<PredictorKind>().unwrap(), PredictorKind::TreeEnsemble);
        assert!(matches!(
            "svm".parse::<PredictorKind>(),
            Err(PredictorError::UnknownKind(_))
        ));
    }
}
