use nalgebra::{DMatrix, DVector};

use super::{
    Dataset, FeatureWindow, ModelParams, PredictorError, PredictorKind, PredictorModel, Stopwatch, TrainReport,
};

/// Ridge strength used when the normal equations are singular.
const RIDGE: f64 = 1e-8;
/// Smallest acceptable squared-pivot ratio of the Cholesky factor.
const PIVOT_RATIO: f64 = 1e-12;

/// Ordinary least squares over the flattened window.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Weights on standardized features.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub ridge_used: bool,
}

impl LinearModel {
    pub fn predict(&self, window: &FeatureWindow) -> f64 {
        let x = window.flatten();
        self.intercept
            + x.iter()
                .zip(&self.weights)
                .zip(self.feature_mean.iter().zip(&self.feature_std))
                .map(|((v, w), (m, s))| w * (v - m) / s)
                .sum::<f64>()
    }

    /// `(intercept, weights)` in the original feature units.
    pub fn coefficients(&self) -> (f64, Vec<f64>) {
        let weights: Vec<f64> = self.weights.iter().zip(&self.feature_std).map(|(w, s)| w / s).collect();
        let shift: f64 = weights.iter().zip(&self.feature_mean).map(|(w, m)| w * m).sum();
        (self.intercept - shift, weights)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + 1
    }
}

pub fn train_linear(dataset: &Dataset) -> Result<PredictorModel, PredictorError> {
    let examples = &dataset.train;
    if examples.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let watch = Stopwatch::start();
    let rows: Vec<Vec<f64>> = examples.iter().map(|e| e.window.flatten()).collect();
    let p = rows[0].len();
    let n = rows.len() as f64;

    let mut mean = vec![0.0; p];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; p];
    for r in &rows {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 1e-18 { s.sqrt() } else { 1.0 };
    }

    // Design matrix: intercept column then standardized features.
    let dim = p + 1;
    let mut xtx = DMatrix::<f64>::zeros(dim, dim);
    let mut xty = DVector::<f64>::zeros(dim);
    let mut z = vec![0.0; dim];
    for (r, ex) in rows.iter().zip(examples) {
        z[0] = 1.0;
        for k in 0..p {
            z[k + 1] = (r[k] - mean[k]) / std[k];
        }
        for i in 0..dim {
            xty[i] += z[i] * ex.target;
            for j in i..dim {
                xtx[(i, j)] += z[i] * z[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            xtx[(i, j)] = xtx[(j, i)];
        }
    }

    let (beta, ridge_used) = match solve_spd(&xtx, &xty) {
        Some(b) => (b, false),
        None => {
            let mut ridged = xtx.clone();
            for i in 1..dim {
                ridged[(i, i)] += RIDGE;
            }
            let b = solve_spd(&ridged, &xty)
                .or_else(|| ridged.clone().lu().solve(&xty))
                .ok_or_else(|| PredictorError::InvalidConfig("normal equations unsolvable".into()))?;
            (b, true)
        }
    };

    let model = LinearModel {
        feature_mean: mean,
        feature_std: std,
        weights: beta.iter().skip(1).copied().collect(),
        intercept: beta[0],
        ridge_used,
    };
    let mean_target = examples.iter().map(|e| e.target).sum::<f64>() / n;
    let initial_loss = examples.iter().map(|e| (e.target - mean_target).powi(2)).sum::<f64>() / n;
    let final_loss = examples
        .iter()
        .map(|e| (e.target - model.predict(&e.window)).powi(2))
        .sum::<f64>()
        / n;
    let parameter_count = model.parameter_count();
    Ok(PredictorModel {
        kind: PredictorKind::Linear,
        node_kind: dataset.node_kind,
        window: dataset.window,
        horizon: dataset.horizon,
        params: ModelParams::Linear(model),
        train_report: TrainReport {
            initial_loss,
            final_loss,
            loss_curve: vec![],
            parameter_count,
            train_time_ms: watch.elapsed_ms().unwrap_or(0.0),
            train_examples: examples.len(),
        },
    })
}

/// Cholesky solve that rejects numerically singular systems.
fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.clone().cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let max = diag.iter().fold(0.0f64, |m, v| m.max(v * v));
    let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if !(max > 0.0) || min / max < PIVOT_RATIO {
        return None;
    }
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{predict_n_step, Example};
    use super::*;

    fn linear(model: &PredictorModel) -> &LinearModel {
        match &model.params {
            ModelParams::Linear(m) => m,
            _ => unreachable!(),
        }
    }

    #[test]
    fn recovers_affine_speed_law() {
        let ex = synthetic(400, 1, 11, |v| 2.0 * v + 10.0);
        let model = train_linear(&dataset(ex, vec![], 1, 1)).unwrap();
        let (b0, w) = linear(&model).coefficients();
        // Feature order per entry: timestamp, relative speed, AoI.
        assert!((b0 - 10.0).abs() < 1e-6, "intercept {b0}");
        assert!(w[0].abs() < 1e-6);
        assert!((w[1] - 2.0).abs() < 1e-6, "slope {}", w[1]);
        assert!(w[2].abs() < 1e-6);
    }

    #[test]
    fn constant_target_gives_flat_model() {
        let ex = synthetic(100, 3, 5, |_| 180.0);
        let model = train_linear(&dataset(ex.clone(), vec![], 3, 1)).unwrap();
        let (b0, w) = linear(&model).coefficients();
        assert!(w.iter().all(|v| v.abs() < 1e-6));
        assert!((b0 - 180.0).abs() < 1e-6 || linear(&model).ridge_used);
        let p = predict_n_step(&model, &ex[7].window, 1).unwrap().aoi_ms;
        assert!((p - 180.0).abs() < 1e-6);
    }

    #[test]
    fn single_example_is_interpolated() {
        let ex: Vec<Example> = synthetic(1, 2, 3, |v| 3.0 * v + 1.0);
        let model = train_linear(&dataset(ex.clone(), vec![], 2, 1)).unwrap();
        assert!(linear(&model).ridge_used);
        let p = predict_n_step(&model, &ex[0].window, 1).unwrap().aoi_ms;
        assert!((p - ex[0].target).abs() < 1e-9);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            train_linear(&dataset(vec![], vec![], 1, 1)),
            Err(PredictorError::EmptyDataset)
        ));
    }
}
