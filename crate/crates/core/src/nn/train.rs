//! Mini-batch training with class-weighted cross-entropy, Adam updates on
//! unfrozen parameters, and patience-based early stopping with best-weight
//! restore.

use super::{ModelGraph, Param};
use crate::seed::derive;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Weighted binary cross-entropy on a single prediction:
/// `weights[y] * -(y log p + (1-y) log(1-p))` with `p` the probability of
/// the malignant class, clamped away from 0 and 1.
pub fn weighted_bce(p: f64, y: u8, weights: (f64, f64)) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    let (w, log_term) = if y == 1 {
        (weights.1, p.ln())
    } else {
        (weights.0, (1.0 - p).ln())
    };
    -w * log_term
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Per-class loss weights; `[benign, malignant]` for the binary task.
    pub class_weights: Vec<f64>,
    /// Epochs without validation-loss improvement before stopping.
    pub early_stop_patience: usize,
    /// Improvement below this margin does not reset the patience counter.
    pub early_stop_min_delta: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// lr 0.001, batch 32, 1000 epochs, class weights (0.2, 1), patience 50.
    pub fn defaults(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            max_epochs: 1000,
            class_weights: vec![0.2, 1.0],
            early_stop_patience: 50,
            early_stop_min_delta: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.early_stop_patience >= self.max_epochs {
            return Err(TrainError::Config(format!(
                "patience {} must be below max epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        if self.class_weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(TrainError::Config("class weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    /// Loss became non-finite.
    Diverged { epoch: usize },
    /// A trainable parameter received no gradient.
    MissingGrad { param: String },
    EmptySet(&'static str),
    Tensor(TensorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(m) => write!(f, "train config: {m}"),
            TrainError::Diverged { epoch } => write!(f, "loss diverged at epoch {epoch}"),
            TrainError::MissingGrad { param } => {
                write!(f, "no gradient for trainable parameter {param}")
            }
            TrainError::EmptySet(which) => write!(f, "{which} set is empty"),
            TrainError::Tensor(e) => write!(f, "train: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

/// Inputs (any per-sample tensor shape) with integer class labels and an
/// optional per-sample auxiliary vector (the cue-guided student trains with
/// its precomputed ensemble cue here).
#[derive(Debug, Clone, Default)]
pub struct DataSet {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub aux: Option<Vec<Vec<f64>>>,
}

impl DataSet {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>) -> Self {
        DataSet {
            inputs,
            labels,
            aux: None,
        }
    }

    pub fn with_aux(mut self, aux: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(aux.len(), self.inputs.len());
        self.aux = Some(aux);
        self
    }

    /// Stacks the auxiliary vectors of the selected samples into `[b, w]`.
    pub fn stack_aux(&self, indices: &[usize]) -> Option<Tensor> {
        let aux = self.aux.as_ref()?;
        let width = aux.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&aux[i]);
        }
        Some(Tensor::new(vec![indices.len(), width], data).expect("aux rows share width"))
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Stacks the selected samples along a fresh leading batch axis.
    pub fn stack(&self, indices: &[usize]) -> Tensor {
        let per = self.inputs[indices[0]].shape().to_vec();
        let mut shape = Vec::with_capacity(per.len() + 1);
        shape.push(indices.len());
        shape.extend_from_slice(&per);
        let mut data = Vec::with_capacity(indices.len() * self.inputs[indices[0]].numel());
        for &i in indices {
            data.extend_from_slice(self.inputs[i].data());
        }
        Tensor::new(shape, data).expect("stacked samples share shapes")
    }

    pub fn subset(&self, indices: &[usize]) -> DataSet {
        DataSet {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            aux: self
                .aux
                .as_ref()
                .map(|aux| indices.iter().map(|&i| aux[i].clone()).collect()),
        }
    }

    /// Class-stratified carve-out: roughly `fraction` of each class goes to
    /// the second set (at least one sample per present class, seeded).
    pub fn stratified_carve(&self, fraction: f64, seed: u64) -> (DataSet, DataSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0xca]));
        let n_classes = self.labels.iter().max().map_or(0, |&m| m + 1);
        let mut held = Vec::new();
        let mut kept = Vec::new();
        for class in 0..n_classes {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == class)
                .collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let take = ((idx.len() as f64 * fraction).round() as usize)
                .max(1)
                .min(idx.len().saturating_sub(1).max(1));
            held.extend_from_slice(&idx[..take]);
            kept.extend_from_slice(&idx[take..]);
        }
        held.sort_unstable();
        kept.sort_unstable();
        (self.subset(&kept), self.subset(&held))
    }
}

/// One forward construction over a batch, ready for a loss head.
pub struct BatchTrace {
    pub graph: Graph,
    pub logits: NodeId,
    /// (parameter index, leaf node) for every parameter that entered the
    /// graph; frozen parameters may be bound or omitted.
    pub bindings: Vec<(usize, NodeId)>,
}

/// Anything the mini-batch loop can train: exposes its parameters and
/// builds a logits graph for a batch of samples.
pub trait Trainable {
    fn trainable_params(&self) -> Vec<&Param>;
    fn trainable_params_mut(&mut self) -> Vec<&mut Param>;
    fn forward_batch(&self, data: &DataSet, indices: &[usize]) -> Result<BatchTrace, TensorError>;
}

impl Trainable for ModelGraph {
    fn trainable_params(&self) -> Vec<&Param> {
        self.params().iter().collect()
    }

    fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        self.params_mut().iter_mut().collect()
    }

    fn forward_batch(&self, data: &DataSet, indices: &[usize]) -> Result<BatchTrace, TensorError> {
        let batch = data.stack(indices);
        let trace = self.forward_trace(&batch)?;
        let bindings = trace
            .param_nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| (i, n))
            .collect();
        Ok(BatchTrace {
            graph: trace.graph,
            logits: trace.logits,
            bindings,
        })
    }
}

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8). Updates
/// apply only where the trainable mask is set; moments are kept per
/// parameter.
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &[&Param]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// One update. `grads[i]` must be `Some` for every trainable parameter;
    /// frozen parameters are left untouched whatever their gradient.
    pub fn step(
        &mut self,
        params: &mut [&mut Param],
        grads: &[Option<Vec<f64>>],
    ) -> Result<(), TrainError> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (i, param) in params.iter_mut().enumerate() {
            if !param.trainable {
                continue;
            }
            let grad = grads[i].as_ref().ok_or_else(|| TrainError::MissingGrad {
                param: param.name.clone(),
            })?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, value) in param.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *value -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Patience policy on validation loss: an epoch only counts as an
/// improvement when it beats the best by more than `min_delta`.
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.best_epoch = epoch;
            StopDecision::Improved
        } else if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch of the best validation loss (1-based); the restored weights.
    pub convergence_epoch: usize,
    pub stopped_epoch: usize,
    pub best_val_loss: f64,
}

fn snapshot(params: &[&Param]) -> Vec<Tensor> {
    params.iter().map(|p| p.value.detach()).collect()
}

fn restore(params: &mut [&mut Param], saved: &[Tensor]) {
    for (p, s) in params.iter_mut().zip(saved) {
        p.value = s.detach();
    }
}

/// Mini-batch loop: seeded shuffle per epoch, weighted cross-entropy on the
/// logits, Adam on trainable parameters, early stopping on validation loss
/// with best-weight restore.
pub fn train<M: Trainable>(
    model: &mut M,
    train_set: &DataSet,
    val_set: &DataSet,
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(config.seed, &[0x7e]));
    let mut adam = Adam::new(config.learning_rate, &model.trainable_params());
    let mut stopper = EarlyStopping::new(config.early_stop_patience, config.early_stop_min_delta);
    let mut best_params = snapshot(&model.trainable_params());
    let mut epochs = Vec::new();
    let mut stopped_epoch = 0;

    for epoch in 1..=config.max_epochs {
        stopped_epoch = epoch;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut trace = model.forward_batch(train_set, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let per_sample =
                trace
                    .graph
                    .weighted_cross_entropy(trace.logits, &labels, &config.class_weights)?;
            let total = trace.graph.sum(per_sample);
            let mean = trace.graph.scale(total, 1.0 / chunk.len() as f64);
            let loss = trace.graph.value(mean)[0];
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            trace.graph.backward(mean, &Tensor::scalar(1.0))?;

            let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.trainable_params().len()];
            for &(pi, node) in &trace.bindings {
                grads[pi] = trace.graph.grad(node).map(<[f64]>::to_vec);
            }
            adam.step(&mut model.trainable_params_mut(), &grads)?;
        }

        let (val_loss, val_accuracy) = evaluate(model, val_set, &config.class_weights)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_accuracy,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best_params = snapshot(&model.trainable_params()),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    restore(&mut model.trainable_params_mut(), &best_params);
    Ok(TrainHistory {
        epochs,
        convergence_epoch: stopper.best_epoch,
        stopped_epoch,
        best_val_loss: stopper.best_loss(),
    })
}

const EVAL_BATCH: usize = 64;

/// Mean weighted loss and plain accuracy over a set.
pub fn evaluate<M: Trainable>(
    model: &M,
    set: &DataSet,
    class_weights: &[f64],
) -> Result<(f64, f64), TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut trace = model.forward_batch(set, chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
        let per = trace
            .graph
            .weighted_cross_entropy(trace.logits, &labels, class_weights)?;
        loss_sum += trace.graph.value(per).iter().sum::<f64>();
        let k = trace.graph.shape(trace.logits)[1];
        for (row, &label) in trace.graph.value(trace.logits).chunks(k).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / set.len() as f64, correct as f64 / set.len() as f64))
}

/// Per-sample class probabilities (softmax over the logits).
pub fn predict_probs<M: Trainable>(model: &M, set: &DataSet) -> Result<Vec<Vec<f64>>, TrainError> {
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut trace = model.forward_batch(set, chunk)?;
        let probs = trace.graph.softmax(trace.logits);
        let k = trace.graph.shape(probs)[1];
        out.extend(trace.graph.value(probs).chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}
