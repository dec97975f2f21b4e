//! Softmax regression and a two-layer ReLU MLP with hand-written
//! backpropagation, plus the local SGD loop that trains adapter factors.
//!
//! Weights are stored `out x in`, so a layer computes `X W^T`. There are no
//! bias terms. Every weight matrix carries an adapter.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lora::{LayerState, LoraAdapter};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Only read for [`ModelKind::Mlp2`].
    #[serde(default)]
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn softmax_regression(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            hidden_dim: 0,
            num_classes,
        }
    }

    pub fn mlp2(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp2,
            input_dim,
            hidden_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "model needs input_dim >= 1 and num_classes >= 2, got {} and {}",
                self.input_dim, self.num_classes
            )));
        }
        if self.kind == ModelKind::Mlp2 && self.hidden_dim == 0 {
            return Err(Error::Config("mlp2 needs hidden_dim >= 1".into()));
        }
        Ok(())
    }

    /// `(out, in)` per weight matrix, input layer first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::SoftmaxRegression => vec![(self.num_classes, self.input_dim)],
            ModelKind::Mlp2 => vec![(self.hidden_dim, self.input_dim), (self.num_classes, self.hidden_dim)],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_shapes().len()
    }

    fn check_weights(&self, weights: &[Matrix]) -> Result<()> {
        let shapes = self.layer_shapes();
        if weights.len() != shapes.len() {
            return Err(Error::LayerIndex {
                index: weights.len(),
                layers: shapes.len(),
            });
        }
        for (w, &shape) in weights.iter().zip(&shapes) {
            if w.shape() != shape {
                return Err(Error::Shape {
                    op: "model weights",
                    lhs: w.shape(),
                    rhs: shape,
                });
            }
        }
        Ok(())
    }
}

/// Features and class labels for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label,
                classes: num_classes,
            });
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn effective_weights(weights: &[LayerState]) -> Result<Vec<Matrix>> {
    weights.iter().map(LayerState::effective_weight).collect()
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let (rows, cols) = logits.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Matrix::from_raw(rows, cols, out)
}

fn relu(m: &Matrix) -> Matrix {
    Matrix::from_raw(m.rows(), m.cols(), m.data().iter().map(|&v| v.max(0.0)).collect())
}

struct Activations {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Hidden pre-activation (mlp2 only).
    hidden_pre: Option<Matrix>,
    probs: Matrix,
}

fn forward_pass(spec: &ModelSpec, weights: &[Matrix], features: &Matrix) -> Result<Activations> {
    spec.check_weights(weights)?;
    if features.cols() != spec.input_dim {
        return Err(Error::Shape {
            op: "forward",
            lhs: features.shape(),
            rhs: (features.rows(), spec.input_dim),
        });
    }
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let logits = features.matmul(&weights[0].transpose())?;
            Ok(Activations {
                inputs: vec![features.clone()],
                hidden_pre: None,
                probs: softmax_rows(&logits),
            })
        }
        ModelKind::Mlp2 => {
            let pre = features.matmul(&weights[0].transpose())?;
            let hidden = relu(&pre);
            let logits = hidden.matmul(&weights[1].transpose())?;
            Ok(Activations {
                inputs: vec![features.clone(), hidden],
                hidden_pre: Some(pre),
                probs: softmax_rows(&logits),
            })
        }
    }
}

/// Class probabilities under the effective weights `W + s B A` of each layer.
pub fn forward(spec: &ModelSpec, weights: &[LayerState], batch: &Batch) -> Result<Matrix> {
    Ok(forward_pass(spec, &effective_weights(weights)?, &batch.features)?.probs)
}

/// Class probabilities for plain (adapter-free) weights.
pub fn forward_weights(spec: &ModelSpec, weights: &[Matrix], features: &Matrix) -> Result<Matrix> {
    Ok(forward_pass(spec, weights, features)?.probs)
}

/// Mean cross-entropy; probabilities are floored at 1e-12 before the log.
pub fn loss(probs: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[(i, y)].max(PROB_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}

/// Loss and `dL/dW` for every layer, at the given plain weights.
pub fn loss_and_gradients(spec: &ModelSpec, weights: &[Matrix], batch: &Batch) -> Result<(f64, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let act = forward_pass(spec, weights, &batch.features)?;
    let loss_value = loss(&act.probs, &batch.labels);
    let n = batch.len() as f64;

    // dL/dlogits = (P - Y) / n
    let mut dlogits = act.probs.clone();
    {
        let c = dlogits.cols();
        let data = dlogits.data_mut();
        for (i, &y) in batch.labels.iter().enumerate() {
            data[i * c + y] -= 1.0;
        }
        data.iter_mut().for_each(|v| *v /= n);
    }

    let grads = match spec.kind {
        ModelKind::SoftmaxRegression => vec![dlogits.transpose().matmul(&act.inputs[0])?],
        ModelKind::Mlp2 => {
            let grad_out = dlogits.transpose().matmul(&act.inputs[1])?;
            let dhidden = dlogits.matmul(&weights[1])?;
            let pre = act.hidden_pre.as_ref().expect("mlp2 keeps its pre-activation");
            let dpre = Matrix::from_raw(
                dhidden.rows(),
                dhidden.cols(),
                dhidden
                    .data()
                    .iter()
                    .zip(pre.data())
                    .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                    .collect(),
            );
            let grad_in = dpre.transpose().matmul(&act.inputs[0])?;
            vec![grad_in, grad_out]
        }
    };
    Ok((loss_value, grads))
}

/// `dL/dW` of one layer, evaluated at its effective weight.
pub fn grad_full_weight(spec: &ModelSpec, weights: &[LayerState], batch: &Batch, layer_index: usize) -> Result<Matrix> {
    if layer_index >= weights.len() {
        return Err(Error::LayerIndex {
            index: layer_index,
            layers: weights.len(),
        });
    }
    let (_, mut grads) = loss_and_gradients(spec, &effective_weights(weights)?, batch)?;
    Ok(grads.swap_remove(layer_index))
}

fn factor_gradients(adapter: &LoraAdapter, g: &Matrix) -> Result<(Matrix, Matrix)> {
    let s = adapter.scale();
    let grad_b = g.matmul(&adapter.a().transpose())?.scaled(s)?;
    let grad_a = adapter.b().transpose().matmul(g)?.scaled(s)?;
    Ok((grad_b, grad_a))
}

/// `(s G A^T, s B^T G)` for the adapter of one layer.
pub fn grad_lora_factors(
    spec: &ModelSpec,
    weights: &[LayerState],
    batch: &Batch,
    layer_index: usize,
) -> Result<(Matrix, Matrix)> {
    let g = grad_full_weight(spec, weights, batch, layer_index)?;
    factor_gradients(&weights[layer_index].adapter, &g)
}

/// Argmax predictions, ties toward the lowest class index.
pub fn predict(spec: &ModelSpec, weights: &[Matrix], features: &Matrix) -> Result<Vec<usize>> {
    let probs = forward_weights(spec, weights, features)?;
    Ok((0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (j, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps_per_round: 50,
            batch_size: 32,
            lr_initial: 0.01,
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::Config(format!(
                "lr_initial must be >= 0, got {}",
                self.lr_initial
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at a global step; the cosine schedule spans the whole run.
    pub fn lr_at(&self, clock: RoundClock, step_in_round: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr_initial,
            LrSchedule::Cosine => {
                let total = (clock.total_rounds * self.steps_per_round).max(1);
                let global = clock.round * self.steps_per_round + step_in_round;
                0.5 * self.lr_initial * (1.0 + (PI * global as f64 / total as f64).cos())
            }
        }
    }
}

/// Position of a local training call within the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundClock {
    pub round: usize,
    pub total_rounds: usize,
}

impl RoundClock {
    pub fn new(round: usize, total_rounds: usize) -> Self {
        RoundClock { round, total_rounds }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapters: Vec<LoraAdapter>,
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
}

/// Shuffled epochs with wraparound.
pub(crate) struct MinibatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl MinibatchSampler {
    pub(crate) fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        MinibatchSampler { order, pos: 0 }
    }

    pub(crate) fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Minibatch SGD on the adapter factors with the backbone held fixed.
pub fn train_local<R: Rng + ?Sized>(
    spec: &ModelSpec,
    backbones: &[Matrix],
    adapters: Vec<LoraAdapter>,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    clock: RoundClock,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    spec.check_weights(backbones)?;
    let mut layers: Vec<LayerState> = backbones
        .iter()
        .cloned()
        .zip(adapters)
        .map(|(w, ad)| LayerState::new(w, ad))
        .collect::<Result<_>>()?;

    let mut sampler = MinibatchSampler::new(dataset.len(), rng);
    let mut losses = Vec::with_capacity(cfg.steps_per_round);
    for step in 0..cfg.steps_per_round {
        let idx = sampler.next_batch(cfg.batch_size, rng);
        let batch = dataset.batch(&idx)?;
        let (loss_value, grads) = loss_and_gradients(spec, &effective_weights(&layers)?, &batch)?;
        losses.push(loss_value);
        let lr = cfg.lr_at(clock, step);
        if lr == 0.0 {
            continue;
        }
        for (layer, g) in layers.iter_mut().zip(&grads) {
            let (grad_b, grad_a) = factor_gradients(&layer.adapter, g)?;
            let factors = layer.adapter.factors_mut();
            factors.b.add_scaled_assign(-lr, &grad_b)?;
            factors.a.add_scaled_assign(-lr, &grad_a)?;
        }
    }
    Ok(TrainOutcome {
        adapters: layers.into_iter().map(|l| l.adapter).collect(),
        losses,
    })
}
