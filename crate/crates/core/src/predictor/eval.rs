use serde::{Deserialize, Serialize};

use super::{predict_n_step, Example, PredictorError, PredictorModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae_ms: f64,
    pub mse: f64,
    /// Percent of predictions within `tolerance` relative error.
    pub accuracy_pct: f64,
    pub tolerance: f64,
    /// Mean wall-clock latency per prediction; `None` without a clock.
    pub mean_latency_ms: Option<f64>,
    pub parameter_count: usize,
    pub examples: usize,
}

/// Scores `model` on `test`. A prediction is accurate when
/// `|pred - truth| <= tolerance * |truth|`.
pub fn evaluate(model: &PredictorModel, test: &[Example], tolerance: f64) -> Result<EvalReport, PredictorError> {
    if test.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let (mut abs, mut sq, mut hits) = (0.0, 0.0, 0usize);
    let (mut lat, mut lat_n) = (0.0, 0usize);
    for ex in test {
        let p = predict_n_step(model, &ex.window, model.horizon)?;
        let err = p.aoi_ms - ex.target;
        abs += err.abs();
        sq += err * err;
        if err.abs() <= tolerance * ex.target.abs() {
            hits += 1;
        }
        if let Some(l) = p.latency_ms {
            lat += l;
            lat_n += 1;
        }
    }
    let n = test.len() as f64;
    Ok(EvalReport {
        mae_ms: abs / n,
        mse: sq / n,
        accuracy_pct: 100.0 * hits as f64 / n,
        tolerance,
        mean_latency_ms: (lat_n > 0).then(|| lat / lat_n as f64),
        parameter_count: model.parameter_count(),
        examples: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{train_linear, train_recurrent, RecurrentNetConfig};
    use super::*;

    #[test]
    fn perfect_model_scores_full() {
        let ex = synthetic(100, 2, 1, |v| 2.0 * v + 10.0);
        let m = train_linear(&dataset(ex.clone(), vec![], 2, 1)).unwrap();
        let r = evaluate(&m, &ex, 0.1).unwrap();
        assert_eq!(r.accuracy_pct, 100.0);
        assert!(r.mae_ms < 1e-6);
    }

    #[test]
    fn constant_predictor_mae_is_mean_abs_deviation() {
        let train = synthetic(40, 1, 2, |_| 100.0);
        let m = train_linear(&dataset(train, vec![], 1, 1)).unwrap();
        let test = synthetic(30, 1, 3, |v| 10.0 * v);
        let mad = test.iter().map(|e| (e.target - 100.0).abs()).sum::<f64>() / 30.0;
        let r = evaluate(&m, &test, 0.1).unwrap();
        assert!((r.mae_ms - mad).abs() < 1e-6);
    }

    #[test]
    fn recurrent_beats_linear_on_quadratic() {
        let f = |v: f64| 0.3 * v * v + 20.0;
        let ds = dataset(synthetic(600, 3, 4, f), synthetic(200, 3, 5, f), 3, 1);
        let lin = train_linear(&ds).unwrap();
        let cfg = RecurrentNetConfig {
            units_per_layer: 8,
            layers: 1,
            dropout: 0.0,
            recurrent_dropout: 0.0,
            epochs: 60,
            learning_rate: 0.01,
            ..RecurrentNetConfig::default()
        };
        let rnn = train_recurrent(&ds, &cfg, 2).unwrap();
        let a = evaluate(&lin, &ds.test, 0.1).unwrap();
        let b = evaluate(&rnn, &ds.test, 0.1).unwrap();
        assert!(b.mae_ms < a.mae_ms, "recurrent {} linear {}", b.mae_ms, a.mae_ms);
    }

    #[test]
    fn empty_testset_rejected() {
        let ex = synthetic(10, 1, 1, |v| v);
        let m = train_linear(&dataset(ex, vec![], 1, 1)).unwrap();
        assert!(evaluate(&m, &[], 0.1).is_err());
    }
}
