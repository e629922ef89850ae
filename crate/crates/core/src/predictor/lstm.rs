//! Stacked LSTM regressor trained by backpropagation through time.
//!
//! All parameters live in one flat vector so the optimizer, the gradient
//! check and the model file share a single layout:
//!
//! ```text
//! for each layer: W (4H x in) | U (4H x H) | b (4H)
//! head: w (H) | b (1)
//! ```
//!
//! Gate order inside every 4H block is input, forget, cell, output.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    Dataset, Example, FeatureWindow, ModelParams, PredictorError, PredictorKind, PredictorModel, Scaler, Stopwatch,
    TrainReport, ENTRY_FEATURES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initializer {
    GlorotUniform,
    Orthogonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    MeanSquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecurrentNetConfig {
    pub units_per_layer: usize,
    pub layers: usize,
    pub dropout: f64,
    pub recurrent_dropout: f64,
    pub activation: Activation,
    pub weight_init: Initializer,
    pub recurrent_weight_init: Initializer,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub loss: Loss,
}

impl Default for RecurrentNetConfig {
    fn default() -> Self {
        Self {
            units_per_layer: 64,
            layers: 4,
            dropout: 0.1,
            recurrent_dropout: 0.1,
            activation: Activation::Tanh,
            weight_init: Initializer::GlorotUniform,
            recurrent_weight_init: Initializer::Orthogonal,
            batch_size: 32,
            epochs: 50,
            optimizer: Optimizer::Adam,
            learning_rate: 0.001,
            loss: Loss::MeanSquaredError,
        }
    }
}

impl RecurrentNetConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        let bad = |m: &str| Err(PredictorError::InvalidConfig(m.to_string()));
        if self.units_per_layer == 0 || self.layers == 0 {
            return bad("recurrent net needs at least one layer of one unit");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.recurrent_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub hidden: usize,
}

impl LayerShape {
    fn w_len(&self) -> usize {
        4 * self.hidden * self.input
    }
    fn u_len(&self) -> usize {
        4 * self.hidden * self.hidden
    }
    fn len(&self) -> usize {
        self.w_len() + self.u_len() + 4 * self.hidden
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmNet {
    pub layers: Vec<LayerShape>,
    pub params: Vec<f64>,
    pub scaler: Scaler,
    /// Hyperparameters the net was built and trained with.
    pub config: Option<RecurrentNetConfig>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-layer activations of one forward pass, kept for the backward pass.
struct LayerCache {
    /// Masked inputs, `T x in`.
    xs: Vec<f64>,
    /// Masked previous hidden states, `T x H`.
    hps: Vec<f64>,
    /// Cell states, `(T + 1) x H` with the zero initial state first.
    cs: Vec<f64>,
    /// Activated gates, `T x 4H`.
    gates: Vec<f64>,
    /// `tanh(c_t)`, `T x H`.
    tcs: Vec<f64>,
    /// Hidden outputs, `T x H`.
    hs: Vec<f64>,
}

struct Masks {
    input: Vec<f64>,
    recurrent: Vec<f64>,
}

impl LstmNet {
    pub fn new_zeroed(input: usize, hidden: usize, layers: usize) -> Self {
        let shapes: Vec<LayerShape> = (0..layers)
            .map(|l| LayerShape {
                input: if l == 0 { input } else { hidden },
                hidden,
            })
            .collect();
        let len = shapes.iter().map(|s| s.len()).sum::<usize>() + hidden + 1;
        Self {
            layers: shapes,
            params: vec![0.0; len],
            scaler: Scaler::identity(),
            config: None,
        }
    }

    /// Glorot-uniform input kernels, orthogonal recurrent kernels, zero
    /// biases except a unit forget-gate bias.
    pub fn init(config: &RecurrentNetConfig, input: usize, seed: u64) -> Self {
        let mut net = Self::new_zeroed(input, config.units_per_layer, config.layers);
        net.config = Some(config.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for shape in net.layers.clone() {
            let h = shape.hidden;
            let w_end = off + shape.w_len();
            fill_init(
                &mut net.params[off..w_end],
                config.weight_init,
                4 * h,
                shape.input,
                &mut rng,
            );
            let u_end = w_end + shape.u_len();
            fill_init(
                &mut net.params[w_end..u_end],
                config.recurrent_weight_init,
                4 * h,
                h,
                &mut rng,
            );
            for k in 0..h {
                net.params[u_end + h + k] = 1.0;
            }
            off += shape.len();
        }
        let h = config.units_per_layer;
        fill_init(&mut net.params[off..off + h], config.weight_init, 1, h, &mut rng);
        net
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map(|s| s.hidden).unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn head_offset(&self) -> usize {
        self.layers.iter().map(|s| s.len()).sum()
    }

    /// Inference on a standardized sequence.
    fn forward_scaled(&self, seq: &[[f64; ENTRY_FEATURES]]) -> f64 {
        let mut input: Vec<f64> = seq.iter().flatten().copied().collect();
        let t_len = seq.len();
        let mut off = 0;
        let mut z = Vec::new();
        for shape in &self.layers {
            let (inp, h) = (shape.input, shape.hidden);
            let w = &self.params[off..off + shape.w_len()];
            let u = &self.params[off + shape.w_len()..off + shape.w_len() + shape.u_len()];
            let b = &self.params[off + shape.w_len() + shape.u_len()..off + shape.len()];
            let mut hprev = vec![0.0; h];
            let mut c = vec![0.0; h];
            let mut out = vec![0.0; t_len * h];
            z.resize(4 * h, 0.0);
            for t in 0..t_len {
                let x = &input[t * inp..(t + 1) * inp];
                gate_preact(w, u, b, x, &hprev, &mut z);
                for k in 0..h {
                    let i = sigmoid(z[k]);
                    let f = sigmoid(z[h + k]);
                    let g = z[2 * h + k].tanh();
                    let o = sigmoid(z[3 * h + k]);
                    c[k] = f * c[k] + i * g;
                    hprev[k] = o * c[k].tanh();
                }
                out[t * h..(t + 1) * h].copy_from_slice(&hprev);
            }
            input = out;
            off += shape.len();
        }
        let h = self.hidden();
        let last = &input[(t_len - 1) * h..];
        let head = &self.params[off..off + h];
        head.iter().zip(last).map(|(a, b)| a * b).sum::<f64>() + self.params[off + h]
    }

    pub fn predict(&self, window: &FeatureWindow) -> f64 {
        let seq = self.scaler.scale_window(window);
        self.scaler.unscale_target(self.forward_scaled(&seq))
    }

    fn forward_train(&self, seq: &[[f64; ENTRY_FEATURES]], masks: Option<&[Masks]>) -> (f64, Vec<LayerCache>) {
        let t_len = seq.len();
        let mut input: Vec<f64> = seq.iter().flatten().copied().collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        let mut z = Vec::new();
        for (l, shape) in self.layers.iter().enumerate() {
            let (inp, h) = (shape.input, shape.hidden);
            let w = &self.params[off..off + shape.w_len()];
            let u = &self.params[off + shape.w_len()..off + shape.w_len() + shape.u_len()];
            let b = &self.params[off + shape.w_len() + shape.u_len()..off + shape.len()];
            let mask = masks.map(|m| &m[l]);
            let mut cache = LayerCache {
                xs: vec![0.0; t_len * inp],
                hps: vec![0.0; t_len * h],
                cs: vec![0.0; (t_len + 1) * h],
                gates: vec![0.0; t_len * 4 * h],
                tcs: vec![0.0; t_len * h],
                hs: vec![0.0; t_len * h],
            };
            z.resize(4 * h, 0.0);
            for t in 0..t_len {
                for k in 0..inp {
                    let m = mask.map_or(1.0, |m| m.input[k]);
                    cache.xs[t * inp + k] = input[t * inp + k] * m;
                }
                if t > 0 {
                    for k in 0..h {
                        let m = mask.map_or(1.0, |m| m.recurrent[k]);
                        cache.hps[t * h + k] = cache.hs[(t - 1) * h + k] * m;
                    }
                }
                gate_preact(
                    w,
                    u,
                    b,
                    &cache.xs[t * inp..(t + 1) * inp],
                    &cache.hps[t * h..(t + 1) * h],
                    &mut z,
                );
                for k in 0..h {
                    let i = sigmoid(z[k]);
                    let f = sigmoid(z[h + k]);
                    let g = z[2 * h + k].tanh();
                    let o = sigmoid(z[3 * h + k]);
                    let gbase = t * 4 * h;
                    cache.gates[gbase + k] = i;
                    cache.gates[gbase + h + k] = f;
                    cache.gates[gbase + 2 * h + k] = g;
                    cache.gates[gbase + 3 * h + k] = o;
                    let c = f * cache.cs[t * h + k] + i * g;
                    cache.cs[(t + 1) * h + k] = c;
                    let tc = c.tanh();
                    cache.tcs[t * h + k] = tc;
                    cache.hs[t * h + k] = o * tc;
                }
            }
            input = cache.hs.clone();
            caches.push(cache);
            off += shape.len();
        }
        let h = self.hidden();
        let last = &input[(t_len - 1) * h..];
        let head = &self.params[off..off + h];
        let y = head.iter().zip(last).map(|(a, b)| a * b).sum::<f64>() + self.params[off + h];
        (y, caches)
    }

    /// Accumulates `dL/dθ` into `grad` given `dL/dŷ`.
    fn backward(&self, caches: &[LayerCache], masks: Option<&[Masks]>, t_len: usize, dy: f64, grad: &mut [f64]) {
        let head_off = self.head_offset();
        let h_top = self.hidden();
        let top = caches.last().expect("at least one layer");
        let last_h = &top.hs[(t_len - 1) * h_top..];
        for k in 0..h_top {
            grad[head_off + k] += dy * last_h[k];
        }
        grad[head_off + h_top] += dy;

        // Gradient arriving at each layer's hidden outputs from above.
        let mut d_above = vec![0.0; t_len * h_top];
        for k in 0..h_top {
            d_above[(t_len - 1) * h_top + k] = dy * self.params[head_off + k];
        }

        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for s in &self.layers {
            offsets.push(acc);
            acc += s.len();
        }

        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let (inp, h) = (shape.input, shape.hidden);
            let off = offsets[l];
            let (w_off, u_off, b_off) = (off, off + shape.w_len(), off + shape.w_len() + shape.u_len());
            let cache = &caches[l];
            let mask = masks.map(|m| &m[l]);
            let mut dx_all = vec![0.0; t_len * inp];
            let mut dh_rec = vec![0.0; h];
            let mut dc = vec![0.0; h];
            let mut dz = vec![0.0; 4 * h];
            for t in (0..t_len).rev() {
                let gbase = t * 4 * h;
                for k in 0..h {
                    let dh = d_above[t * h + k] + dh_rec[k];
                    let i = cache.gates[gbase + k];
                    let f = cache.gates[gbase + h + k];
                    let g = cache.gates[gbase + 2 * h + k];
                    let o = cache.gates[gbase + 3 * h + k];
                    let tc = cache.tcs[t * h + k];
                    let c_prev = cache.cs[t * h + k];
                    let dct = dc[k] + dh * o * (1.0 - tc * tc);
                    dz[k] = dct * g * i * (1.0 - i);
                    dz[h + k] = dct * c_prev * f * (1.0 - f);
                    dz[2 * h + k] = dct * i * (1.0 - g * g);
                    dz[3 * h + k] = dh * tc * o * (1.0 - o);
                    dc[k] = dct * f;
                }
                let x = &cache.xs[t * inp..(t + 1) * inp];
                let hp = &cache.hps[t * h..(t + 1) * h];
                for r in 0..4 * h {
                    let d = dz[r];
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = w_off + r * inp;
                    for k in 0..inp {
                        grad[wrow + k] += d * x[k];
                    }
                    let urow = u_off + r * h;
                    for k in 0..h {
                        grad[urow + k] += d * hp[k];
                    }
                    grad[b_off + r] += d;
                }
                // dx = W^T dz, dh_prev = U^T dz.
                let dx = &mut dx_all[t * inp..(t + 1) * inp];
                for v in dh_rec.iter_mut() {
                    *v = 0.0;
                }
                for r in 0..4 * h {
                    let d = dz[r];
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = &self.params[w_off + r * inp..w_off + (r + 1) * inp];
                    for k in 0..inp {
                        dx[k] += d * wrow[k];
                    }
                    let urow = &self.params[u_off + r * h..u_off + (r + 1) * h];
                    for k in 0..h {
                        dh_rec[k] += d * urow[k];
                    }
                }
                if t == 0 {
                    // h_{-1} is the zero state.
                    dh_rec.iter_mut().for_each(|v| *v = 0.0);
                } else if let Some(m) = mask {
                    for k in 0..h {
                        dh_rec[k] *= m.recurrent[k];
                    }
                }
                if let Some(m) = mask {
                    for k in 0..inp {
                        dx[k] *= m.input[k];
                    }
                }
            }
            d_above = dx_all;
        }
    }

    fn batch_loss_grad(&self, batch: &[(Vec<[f64; ENTRY_FEATURES]>, f64)], grad: &mut [f64]) -> f64 {
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (seq, y) in batch {
            let (pred, caches) = self.forward_train(seq, None);
            let err = pred - y;
            loss += err * err * scale;
            self.backward(&caches, None, seq.len(), 2.0 * err * scale, grad);
        }
        loss
    }

    fn batch_loss(&self, batch: &[(Vec<[f64; ENTRY_FEATURES]>, f64)]) -> f64 {
        batch
            .iter()
            .map(|(seq, y)| (self.forward_scaled(seq) - y).powi(2))
            .sum::<f64>()
            / batch.len() as f64
    }
}

fn gate_preact(w: &[f64], u: &[f64], b: &[f64], x: &[f64], hprev: &[f64], z: &mut [f64]) {
    let inp = x.len();
    let h = hprev.len();
    for r in 0..z.len() {
        let mut acc = b[r];
        let wrow = &w[r * inp..(r + 1) * inp];
        for k in 0..inp {
            acc += wrow[k] * x[k];
        }
        let urow = &u[r * h..(r + 1) * h];
        for k in 0..h {
            acc += urow[k] * hprev[k];
        }
        z[r] = acc;
    }
}

/// Fills a row-major `rows x cols` kernel.
fn fill_init<R: Rng>(out: &mut [f64], init: Initializer, rows: usize, cols: usize, rng: &mut R) {
    match init {
        Initializer::GlorotUniform => {
            // fan_in = cols (inputs), fan_out = rows (units).
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for v in out.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
        }
        Initializer::Orthogonal => {
            // Orthonormal columns (rows >= cols) or rows, via Gram-Schmidt on
            // a Gaussian draw.
            let mut m: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
            if rows >= cols {
                orthonormalize(&mut m, rows, cols, false);
            } else {
                orthonormalize(&mut m, rows, cols, true);
            }
            out.copy_from_slice(&m);
        }
    }
}

/// Modified Gram-Schmidt over the columns (or rows) of a row-major matrix.
fn orthonormalize(m: &mut [f64], rows: usize, cols: usize, by_rows: bool) {
    let (count, len) = if by_rows { (rows, cols) } else { (cols, rows) };
    let idx = |v: usize, k: usize| if by_rows { v * cols + k } else { k * cols + v };
    for v in 0..count {
        for prev in 0..v {
            let dot: f64 = (0..len).map(|k| m[idx(v, k)] * m[idx(prev, k)]).sum();
            for k in 0..len {
                m[idx(v, k)] -= dot * m[idx(prev, k)];
            }
        }
        let norm: f64 = (0..len).map(|k| m[idx(v, k)].powi(2)).sum::<f64>().sqrt();
        let norm = if norm > 1e-12 { norm } else { 1.0 };
        for k in 0..len {
            m[idx(v, k)] /= norm;
        }
    }
}

fn draw_masks<R: Rng>(net: &LstmNet, config: &RecurrentNetConfig, rng: &mut R) -> Vec<Masks> {
    let bern = |p: f64, n: usize, rng: &mut R| -> Vec<f64> {
        if p <= 0.0 {
            return vec![1.0; n];
        }
        let keep = 1.0 / (1.0 - p);
        (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
    };
    net.layers
        .iter()
        .map(|s| Masks {
            input: bern(config.dropout, s.input, rng),
            recurrent: bern(config.recurrent_dropout, s.hidden, rng),
        })
        .collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-7;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        let lr_t = self.lr * bc2.sqrt() / bc1;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            params[i] -= lr_t * self.m[i] / (self.v[i].sqrt() + Self::EPS);
        }
    }
}

fn scaled_examples(scaler: &Scaler, examples: &[Example]) -> Vec<(Vec<[f64; ENTRY_FEATURES]>, f64)> {
    examples
        .iter()
        .map(|e| (scaler.scale_window(&e.window), scaler.scale_target(e.target)))
        .collect()
}

pub fn train_recurrent(
    dataset: &Dataset,
    config: &RecurrentNetConfig,
    seed: u64,
) -> Result<PredictorModel, PredictorError> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let watch = Stopwatch::start();
    let mut net = LstmNet::init(config, ENTRY_FEATURES, seed);
    net.scaler = Scaler::fit(&dataset.train);
    let data = scaled_examples(&net.scaler, &dataset.train);
    let initial_loss = net.batch_loss(&data);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1057);
    let mut adam = Adam::new(net.params.len(), config.learning_rate);
    let mut grad = vec![0.0; net.params.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let dropout = config.dropout > 0.0 || config.recurrent_dropout > 0.0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let (seq, y) = &data[idx];
                let masks = dropout.then(|| draw_masks(&net, config, &mut rng));
                let (pred, caches) = net.forward_train(seq, masks.as_deref());
                let err = pred - y;
                epoch_loss += err * err;
                net.backward(&caches, masks.as_deref(), seq.len(), 2.0 * err * scale, &mut grad);
            }
            adam.step(&mut net.params, &grad);
        }
        let epoch_loss = epoch_loss / data.len() as f64;
        if !epoch_loss.is_finite() || net.params.iter().any(|p| !p.is_finite()) {
            return Err(PredictorError::Diverged { epoch });
        }
        loss_curve.push(epoch_loss);
    }

    let final_loss = loss_curve.last().copied().unwrap_or(initial_loss);
    let parameter_count = net.parameter_count();
    Ok(PredictorModel {
        kind: PredictorKind::Recurrent,
        node_kind: dataset.node_kind,
        window: dataset.window,
        horizon: dataset.horizon,
        params: ModelParams::Recurrent(net),
        train_report: TrainReport {
            initial_loss,
            final_loss,
            loss_curve,
            parameter_count,
            train_time_ms: watch.elapsed_ms().unwrap_or(0.0),
            train_examples: dataset.train.len(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub samples: usize,
    pub seq_len: usize,
    /// Start from all-zero parameters instead of the configured init.
    pub zero_weights: bool,
    /// Feed all-zero input sequences.
    pub zero_input: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples: 3,
            seq_len: 4,
            zero_weights: false,
            zero_input: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst error restricted to gate and head biases.
    pub bias_max_rel_error: f64,
    pub checked: usize,
}

/// Compares BPTT gradients against central finite differences on every
/// parameter of a small network. Gradients smaller than `1e-6` in magnitude
/// are compared on an absolute scale.
pub fn gradient_check(
    config: &RecurrentNetConfig,
    options: GradCheckOptions,
    seed: u64,
) -> Result<GradCheckReport, PredictorError> {
    config.validate()?;
    if config.dropout > 0.0 || config.recurrent_dropout > 0.0 {
        return Err(PredictorError::DropoutInGradientCheck);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = if options.zero_weights {
        LstmNet::new_zeroed(ENTRY_FEATURES, config.units_per_layer, config.layers)
    } else {
        LstmNet::init(config, ENTRY_FEATURES, seed)
    };
    if !options.zero_weights {
        // Nudge biases away from their structured init so every path carries gradient.
        for v in net.params.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let batch: Vec<(Vec<[f64; ENTRY_FEATURES]>, f64)> = (0..options.samples)
        .map(|_| {
            let seq = (0..options.seq_len)
                .map(|_| {
                    if options.zero_input {
                        [0.0; ENTRY_FEATURES]
                    } else {
                        std::array::from_fn(|_| rng.gen_range(-1.5..1.5))
                    }
                })
                .collect();
            (seq, rng.gen_range(-1.0..1.0))
        })
        .collect();

    let mut grad = vec![0.0; net.params.len()];
    net.batch_loss_grad(&batch, &mut grad);

    let bias_idx = bias_indices(&net);
    let mut max_rel: f64 = 0.0;
    let mut bias_max: f64 = 0.0;
    for i in 0..net.params.len() {
        let orig = net.params[i];
        net.params[i] = orig + options.epsilon;
        let plus = net.batch_loss(&batch);
        net.params[i] = orig - options.epsilon;
        let minus = net.batch_loss(&batch);
        net.params[i] = orig;
        let numeric = (plus - minus) / (2.0 * options.epsilon);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        if bias_idx.contains(&i) {
            bias_max = bias_max.max(rel);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        bias_max_rel_error: bias_max,
        checked: net.params.len(),
    })
}

fn bias_indices(net: &LstmNet) -> std::collections::BTreeSet<usize> {
    let mut out = std::collections::BTreeSet::new();
    let mut off = 0;
    for s in &net.layers {
        let b = off + s.w_len() + s.u_len();
        out.extend(b..b + 4 * s.hidden);
        off += s.len();
    }
    out.insert(off + net.hidden());
    out
}
