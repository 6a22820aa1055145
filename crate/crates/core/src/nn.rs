//! A small fully connected classifier trained with minibatch SGD + momentum.
//!
//! Hidden layers use ReLU, the output layer is affine. Gradients are exact
//! reverse-mode; everything is deterministic given the seeds.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::scaling::LogitRecord;

const CHECKPOINT_FORMAT: &str = "atskd-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    seed: u64,
    /// Row-major `out x in` matrices, one per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Parameter-shaped buffers: gradients, velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn fill_zero(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.fill(0.0);
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for x in v {
                *x *= s;
            }
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.biases)
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl MlpModel {
    /// Uniform init in `[-a, a]` with `a = sqrt(6 / fan_in)` for layers that
    /// feed a ReLU and `a = sqrt(3 / fan_in)` for the output layer, so unit
    /// variance inputs give roughly unit variance logits. Biases start at 0.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::contract(format!(
                "layer dims need at least 2 positive entries, got {layer_dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, pair) in layer_dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let gain = if l + 1 == layers { 3.0 } else { 6.0 };
            let a = (gain / fan_in as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            seed,
            weights,
            biases,
        })
    }

    /// Builds a model from explicit parameters (row-major `out x in`).
    pub fn from_parameters(
        layer_dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let model = Self {
            layer_dims,
            seed: 0,
            weights,
            biases,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let dims = &self.layer_dims;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::contract(format!("bad layer dims {dims:?}")));
        }
        if self.weights.len() != dims.len() - 1 || self.biases.len() != dims.len() - 1 {
            return Err(Error::contract("layer count does not match dims"));
        }
        for (l, pair) in dims.windows(2).enumerate() {
            if self.weights[l].len() != pair[0] * pair[1] || self.biases[l].len() != pair[1] {
                return Err(Error::contract(format!("layer {l} shape mismatch")));
            }
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .flatten()
            .all(|v| v.is_finite())
    }

    fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::LengthMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }
}

/// Post-activation outputs of every layer, input first, logits last.
struct Trace {
    activations: Vec<Vec<f64>>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bias)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn trace(model: &MlpModel, input: &[f64]) -> Trace {
    let mut activations = Vec::with_capacity(model.num_layers() + 1);
    activations.push(input.to_vec());
    for l in 0..model.num_layers() {
        let mut z = affine(&model.weights[l], &model.biases[l], &activations[l]);
        if l + 1 < model.num_layers() {
            for v in &mut z {
                *v = v.max(0.0);
            }
        }
        activations.push(z);
    }
    Trace { activations }
}

/// Logits for one input.
pub fn forward(model: &MlpModel, input: &[f64]) -> Result<Vec<f64>> {
    model.check_input(input)?;
    Ok(trace(model, input).activations.pop().unwrap())
}

fn accumulate(model: &MlpModel, tr: &Trace, grad_logits: &[f64], out: &mut Gradients) {
    let mut delta = grad_logits.to_vec();
    for l in (0..model.num_layers()).rev() {
        let a_prev = &tr.activations[l];
        let n_in = a_prev.len();
        let gw = &mut out.weights[l];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &mut gw[o * n_in..(o + 1) * n_in];
            for (g, a) in row.iter_mut().zip(a_prev) {
                *g += d * a;
            }
        }
        for (g, d) in out.biases[l].iter_mut().zip(&delta) {
            *g += d;
        }
        if l == 0 {
            break;
        }
        // Propagate through W^T then the ReLU mask of layer l-1's output.
        let w = &model.weights[l];
        let mut next = vec![0.0; n_in];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            for (n, wv) in next.iter_mut().zip(row) {
                *n += d * wv;
            }
        }
        for (n, a) in next.iter_mut().zip(a_prev) {
            if *a <= 0.0 {
                *n = 0.0;
            }
        }
        delta = next;
    }
}

/// Parameter gradients of `<grad_logits, logits(input)>`.
pub fn backward(model: &MlpModel, input: &[f64], grad_logits: &[f64]) -> Result<Gradients> {
    model.check_input(input)?;
    if grad_logits.len() != model.num_classes() {
        return Err(Error::LengthMismatch {
            expected: model.num_classes(),
            got: grad_logits.len(),
        });
    }
    let tr = trace(model, input);
    let mut g = Gradients::zeros_like(model);
    accumulate(model, &tr, grad_logits, &mut g);
    Ok(g)
}

/// Momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Gradients,
}

impl SgdState {
    pub fn new(model: &MlpModel) -> Self {
        Self {
            velocity: Gradients::zeros_like(model),
        }
    }
}

/// `v = momentum * v + g; w -= lr * v`.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &Gradients,
    state: &mut SgdState,
    learning_rate: f64,
    momentum: f64,
) {
    let params = model.weights.iter_mut().chain(model.biases.iter_mut());
    let vels = state
        .velocity
        .weights
        .iter_mut()
        .chain(state.velocity.biases.iter_mut());
    let gs = grads.weights.iter().chain(&grads.biases);
    for ((p, v), g) in params.zip(vels).zip(gs) {
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v + g;
            *p -= learning_rate * *v;
        }
    }
}

/// Multiply the learning rate by `gamma` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub gamma: f64,
    pub milestones: Vec<usize>,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            milestones: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    #[serde(default)]
    pub lr_decay: LrDecay,
    /// Seeds the minibatch shuffle order.
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract("momentum must be in [0, 1)"));
        }
        if !(self.lr_decay.gamma > 0.0 && self.lr_decay.gamma.is_finite()) {
            return Err(Error::contract("lr_decay.gamma must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_decay
            .milestones
            .iter()
            .filter(|&&m| m <= epoch)
            .count();
        self.learning_rate * self.lr_decay.gamma.powi(passed as i32)
    }
}

/// Per-sample loss and logit gradient used by [`train`].
pub trait SampleObjective {
    /// `index` is the sample's position in the training set.
    fn loss_and_grad(&self, index: usize, logits: &[f64], label: usize) -> (f64, Vec<f64>);
}

/// Plain cross-entropy at temperature 1.
pub struct CrossEntropy;

impl SampleObjective for CrossEntropy {
    fn loss_and_grad(&self, _index: usize, logits: &[f64], label: usize) -> (f64, Vec<f64>) {
        let p = crate::scaling::softmax_slice(logits);
        let loss = crate::scaling::lse_unchecked(logits) - logits[label];
        let mut g = p;
        g[label] -= 1.0;
        (loss, g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Running accuracy over the epoch's minibatches.
    pub train_acc: f64,
    /// End-of-epoch accuracy on the held-out set; NaN when none was given.
    pub test_acc: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Minibatch SGD with momentum. Batches average the per-sample gradients.
pub fn train(
    mut model: MlpModel,
    train_data: &LabeledData,
    test_data: Option<&LabeledData>,
    objective: &dyn SampleObjective,
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if train_data.input_dim() != model.input_dim() {
        return Err(Error::LengthMismatch {
            expected: model.input_dim(),
            got: train_data.input_dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut state = SgdState::new(&model);
    let mut grads = Gradients::zeros_like(&model);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            for &i in batch {
                let tr = trace(&model, &train_data.inputs()[i]);
                let logits = tr.activations.last().unwrap();
                let label = train_data.labels()[i];
                if argmax(logits) == label {
                    correct += 1;
                }
                let (loss, g) = objective.loss_and_grad(i, logits, label);
                loss_sum += loss;
                accumulate(&model, &tr, &g, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd_step(&mut model, &grads, &mut state, lr, cfg.momentum);
        }
        if !model.all_finite() {
            return Err(Error::contract(format!(
                "parameters diverged to non-finite values in epoch {epoch}"
            )));
        }
        let n = train_data.len() as f64;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_acc: test_data.map_or(f64::NAN, |d| accuracy(&model, d)),
        });
    }
    Ok((model, history))
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy(model: &MlpModel, data: &LabeledData) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let hits = data
        .inputs()
        .iter()
        .zip(data.labels())
        .filter(|(x, y)| argmax(&trace(model, x).activations.pop().unwrap()) == **y)
        .count();
    hits as f64 / data.len() as f64
}

/// One labeled logit record per sample, in dataset order.
pub fn collect_logits(model: &MlpModel, data: &LabeledData) -> Result<Vec<LogitRecord>> {
    data.inputs()
        .iter()
        .zip(data.labels())
        .map(|(x, &y)| LogitRecord::new(forward(model, x)?, y))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: MlpModel,
}

/// Writes a JSON checkpoint. Floats are printed shortest-round-trip, so a
/// reload is bit-exact.
pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        model: model.clone(),
    };
    let text = serde_json::to_string(&ck).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    ck.model.check_shapes()?;
    Ok(ck.model)
}
