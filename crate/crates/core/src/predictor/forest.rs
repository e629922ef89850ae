use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Dataset, FeatureWindow, ModelParams, PredictorError, PredictorKind, PredictorModel, Stopwatch, TrainReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 20,
            max_depth: 8,
            min_samples_leaf: 2,
        }
    }
}

/// Array-encoded binary tree. Leaves have `feature == usize::MAX`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub value: f64,
}

impl TreeNode {
    fn leaf(value: f64) -> Self {
        Self {
            feature: usize::MAX,
            threshold: 0.0,
            left: 0,
            right: 0,
            value,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.feature == usize::MAX
    }
}

impl RegressionTree {
    pub fn predict_features(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            if n.is_leaf() {
                return n.value;
            }
            i = if x[n.feature] <= n.threshold { n.left } else { n.right };
        }
    }

    /// `(feature, threshold)` of the root split, if any.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        let r = self.nodes.first()?;
        (!r.is_leaf()).then_some((r.feature, r.threshold))
    }

    fn fit(x: &[Vec<f64>], y: &[f64], idx: Vec<usize>, config: &ForestConfig) -> Self {
        let mut tree = Self { nodes: Vec::new() };
        tree.grow(x, y, idx, 0, config);
        tree
    }

    fn grow(&mut self, x: &[Vec<f64>], y: &[f64], idx: Vec<usize>, depth: usize, config: &ForestConfig) -> usize {
        let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        let me = self.nodes.len();
        self.nodes.push(TreeNode::leaf(mean));
        if depth >= config.max_depth || idx.len() < 2 * config.min_samples_leaf.max(1) {
            return me;
        }
        let Some((feature, threshold)) = best_split(x, y, &idx, config.min_samples_leaf.max(1)) else {
            return me;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x[i][feature] <= threshold);
        let left = self.grow(x, y, l, depth + 1, config);
        let right = self.grow(x, y, r, depth + 1, config);
        self.nodes[me] = TreeNode {
            feature,
            threshold,
            left,
            right,
            value: mean,
        };
        me
    }
}

/// Split minimizing the summed squared error of both children; thresholds
/// sit halfway between consecutive distinct values.
fn best_split(x: &[Vec<f64>], y: &[f64], idx: &[usize], min_leaf: usize) -> Option<(usize, f64)> {
    let n = idx.len();
    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
    let parent_sse = total_sq - total * total / n as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = idx.to_vec();
    for f in 0..x[idx[0]].len() {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let (mut s, mut sq) = (0.0, 0.0);
        for k in 0..n - 1 {
            let yi = y[order[k]];
            s += yi;
            sq += yi * yi;
            let (lo, hi) = (x[order[k]][f], x[order[k + 1]][f]);
            let nl = k + 1;
            if lo == hi || nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let nr = (n - nl) as f64;
            let sse = (sq - s * s / nl as f64) + ((total_sq - sq) - (total - s).powi(2) / nr);
            if best.is_none_or(|(b, _, _)| sse < b - 1e-12) {
                best = Some((sse, f, lo + (hi - lo) / 2.0));
            }
        }
    }
    best.filter(|(sse, _, _)| *sse < parent_sse - 1e-12)
        .map(|(_, f, t)| (f, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub config: ForestConfig,
    pub trees: Vec<RegressionTree>,
}

impl ForestModel {
    pub fn predict(&self, window: &FeatureWindow) -> f64 {
        let x = window.flatten();
        self.trees.iter().map(|t| t.predict_features(&x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn parameter_count(&self) -> usize {
        // Split nodes carry (feature, threshold); leaves carry a value.
        self.trees
            .iter()
            .flat_map(|t| &t.nodes)
            .map(|n| if n.is_leaf() { 1 } else { 2 })
            .sum()
    }
}

/// Bagged CART regression. A single tree is fitted on the full sample.
pub fn train_forest(dataset: &Dataset, config: &ForestConfig, seed: u64) -> Result<PredictorModel, PredictorError> {
    if dataset.train.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    if config.trees == 0 {
        return Err(PredictorError::InvalidConfig("forest needs at least one tree".into()));
    }
    let watch = Stopwatch::start();
    let x: Vec<Vec<f64>> = dataset.train.iter().map(|e| e.window.flatten()).collect();
    let y: Vec<f64> = dataset.train.iter().map(|e| e.target).collect();
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trees = (0..config.trees)
        .map(|_| {
            let idx = if config.trees == 1 {
                (0..n).collect()
            } else {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            };
            RegressionTree::fit(&x, &y, idx, config)
        })
        .collect();
    let model = ForestModel { config: *config, trees };

    let mean = y.iter().sum::<f64>() / n as f64;
    let initial_loss = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let final_loss = dataset
        .train
        .iter()
        .map(|e| (model.predict(&e.window) - e.target).powi(2))
        .sum::<f64>()
        / n as f64;
    let parameter_count = model.parameter_count();
    Ok(PredictorModel {
        kind: PredictorKind::TreeEnsemble,
        node_kind: dataset.node_kind,
        window: dataset.window,
        horizon: dataset.horizon,
        params: ModelParams::Forest(model),
        train_report: TrainReport {
            initial_loss,
            final_loss,
            loss_curve: vec![],
            parameter_count,
            train_time_ms: watch.elapsed_ms().unwrap_or(0.0),
            train_examples: n,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    fn forest(m: &PredictorModel) -> &ForestModel {
        match &m.params {
            ModelParams::Forest(f) => f,
            _ => unreachable!(),
        }
    }

    #[test]
    fn depth_zero_single_tree_predicts_mean() {
        let ex = synthetic(50, 2, 3, |v| v * 3.0);
        let mean = ex.iter().map(|e| e.target).sum::<f64>() / 50.0;
        let cfg = ForestConfig {
            trees: 1,
            max_depth: 0,
            min_samples_leaf: 1,
        };
        let m = train_forest(&dataset(ex.clone(), vec![], 2, 1), &cfg, 1).unwrap();
        for e in &ex {
            assert!((m.raw_predict(&e.window) - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn depth_one_recovers_step() {
        let ex = synthetic(200, 1, 4, |v| if v < 12.0 { 50.0 } else { 400.0 });
        let cfg = ForestConfig {
            trees: 1,
            max_depth: 1,
            min_samples_leaf: 1,
        };
        let m = train_forest(&dataset(ex.clone(), vec![], 1, 1), &cfg, 1).unwrap();
        let (feature, threshold) = forest(&m).trees[0].root_split().unwrap();
        assert_eq!(feature, 1);
        // Exhaustive oracle: the largest speed below the step and smallest above it.
        let below = ex
            .iter()
            .map(|e| e.window.last().relative_speed)
            .filter(|&v| v < 12.0)
            .fold(f64::MIN, f64::max);
        let above = ex
            .iter()
            .map(|e| e.window.last().relative_speed)
            .filter(|&v| v >= 12.0)
            .fold(f64::MAX, f64::min);
        assert!(threshold >= below && threshold < above);
        for e in &ex {
            assert_eq!(m.raw_predict(&e.window), e.target);
        }
    }

    #[test]
    fn prediction_is_mean_of_trees() {
        let ex = synthetic(80, 2, 5, |v| v * v);
        let cfg = ForestConfig {
            trees: 5,
            max_depth: 3,
            min_samples_leaf: 1,
        };
        let m = train_forest(&dataset(ex.clone(), vec![], 2, 1), &cfg, 9).unwrap();
        let f = forest(&m);
        let x = ex[3].window.flatten();
        let manual = f.trees.iter().map(|t| t.predict_features(&x)).sum::<f64>() / 5.0;
        assert_eq!(m.raw_predict(&ex[3].window), manual);
    }

    #[test]
    fn seed_determinism() {
        let ex = synthetic(60, 2, 6, |v| v);
        let ds = dataset(ex, vec![], 2, 1);
        let cfg = ForestConfig::default();
        assert_eq!(
            train_forest(&ds, &cfg, 3).unwrap().params,
            train_forest(&ds, &cfg, 3).unwrap().params
        );
    }
}
