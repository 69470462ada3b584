//! The cue-guided student: a densely connected network whose output is
//! concatenated with the frozen consult's prediction and re-elaborated by
//! three dense layers. Training error flows through the student and head
//! only; the consult never receives a gradient.

use crate::experts::{ConsultEnsemble, ExpertError};
use crate::nn::{
    train, BatchTrace, CheckpointError, DataSet, InputShape, LayerSpec, ModelError, ModelGraph,
    Param, TrainConfig, TrainError, TrainHistory, Trainable,
};
use crate::seed::derive;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum KdlError {
    WidthMismatch(String),
    Expert(ExpertError),
    Model(ModelError),
    Train(TrainError),
    Tensor(TensorError),
    Checkpoint(CheckpointError),
    Bundle(String),
    Io(std::io::Error),
}

impl fmt::Display for KdlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KdlError::WidthMismatch(m) => write!(f, "kdl width mismatch: {m}"),
            KdlError::Expert(e) => write!(f, "{e}"),
            KdlError::Model(e) => write!(f, "{e}"),
            KdlError::Train(e) => write!(f, "{e}"),
            KdlError::Tensor(e) => write!(f, "{e}"),
            KdlError::Checkpoint(e) => write!(f, "{e}"),
            KdlError::Bundle(m) => write!(f, "kdl bundle: {m}"),
            KdlError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for KdlError {}

impl From<ExpertError> for KdlError {
    fn from(e: ExpertError) -> Self {
        KdlError::Expert(e)
    }
}

impl From<ModelError> for KdlError {
    fn from(e: ModelError) -> Self {
        KdlError::Model(e)
    }
}

impl From<TrainError> for KdlError {
    fn from(e: TrainError) -> Self {
        KdlError::Train(e)
    }
}

impl From<TensorError> for KdlError {
    fn from(e: TensorError) -> Self {
        KdlError::Tensor(e)
    }
}

impl From<CheckpointError> for KdlError {
    fn from(e: CheckpointError) -> Self {
        KdlError::Checkpoint(e)
    }
}

impl From<std::io::Error> for KdlError {
    fn from(e: std::io::Error) -> Self {
        KdlError::Io(e)
    }
}

/// What joins the cue: the student's penultimate feature vector (richer
/// signal) or its 2-class probabilities. Both readings are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueJoin {
    Features,
    Probabilities,
}

/// Where the cue comes from: a frozen consult, or a fixed vector. The
/// unaided baseline is the same architecture with a constant zero cue.
#[derive(Debug, Clone)]
pub enum CueSource {
    Ensemble(ConsultEnsemble),
    Constant(Vec<f64>),
}

impl CueSource {
    pub fn width(&self) -> usize {
        match self {
            CueSource::Ensemble(_) => 2,
            CueSource::Constant(v) => v.len(),
        }
    }
}

/// Student + frozen cue source + trainable head.
#[derive(Debug, Clone)]
pub struct KdlModel {
    pub student: ModelGraph,
    pub cue_source: CueSource,
    pub head: ModelGraph,
    pub cue_join: CueJoin,
    pub head_sizes: (usize, usize),
}

/// Desk-scale student: learned input normalization, two dense blocks with a
/// pooling stage between, global average pooling, then either a feature
/// layer or a probability head depending on the join mode.
pub fn student_layers(feature_width: usize, cue_join: CueJoin) -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::InputNormConv { out_channels: 8 },
        LayerSpec::DenseBlock { layers: 4, growth: 8 },
        LayerSpec::MaxPool2,
        LayerSpec::DenseBlock { layers: 4, growth: 8 },
        LayerSpec::MaxPool2,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense {
            units: feature_width,
        },
    ];
    if cue_join == CueJoin::Probabilities {
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dense { units: 2 });
        layers.push(LayerSpec::Softmax);
    }
    layers
}

/// Composes the student with a cue source and a fresh 3-layer head whose
/// input is `student width + cue width`.
pub fn build_kdl(
    student: ModelGraph,
    cue_source: CueSource,
    head_sizes: (usize, usize),
    cue_join: CueJoin,
    seed: u64,
) -> Result<KdlModel, KdlError> {
    if let CueSource::Ensemble(ensemble) = &cue_source {
        let expert_shape = ensemble.experts[0].1.input_shape;
        if expert_shape != student.input_shape {
            return Err(KdlError::WidthMismatch(format!(
                "consult expects {expert_shape:?}, student expects {:?}",
                student.input_shape
            )));
        }
    }
    let student_width = student.output_width();
    if student_width == 0 {
        return Err(KdlError::WidthMismatch(
            "student has no dense output layer".into(),
        ));
    }
    let head_input = student_width + cue_source.width();
    let (h1, h2) = head_sizes;
    let head = ModelGraph::build(
        vec![
            LayerSpec::Dense { units: h1 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: h2 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ],
        InputShape::flat(head_input),
        derive(seed, &[0xd1]),
    )?;
    Ok(KdlModel {
        student,
        cue_source,
        head,
        cue_join,
        head_sizes,
    })
}

/// Full trace of a KDL forward, with the pieces tests and Grad-CAM need.
pub struct KdlTrace {
    pub graph: Graph,
    pub logits: NodeId,
    pub output: NodeId,
    pub student_taps: Vec<(String, NodeId)>,
    pub student_params: Vec<NodeId>,
    pub head_params: Vec<NodeId>,
    /// The cue node after `stop_gradient` (in-graph mode) or the constant
    /// cue leaf (cached mode).
    pub cue: NodeId,
    /// Spatial activations inside the consult's experts (in-graph cue mode
    /// only); explanations over these must come out identically zero.
    pub cue_taps: Vec<(String, NodeId)>,
}

impl KdlModel {
    /// Head input width: student output + cue width.
    pub fn head_input_width(&self) -> usize {
        self.student.output_width() + self.cue_source.width()
    }

    /// Cue vector per sample, computed once per set; valid for a whole run
    /// because the cue source is frozen.
    pub fn cues_for(&self, images: &DataSet) -> Result<Vec<Vec<f64>>, KdlError> {
        match &self.cue_source {
            CueSource::Constant(v) => Ok(vec![v.clone(); images.len()]),
            CueSource::Ensemble(ensemble) => {
                let indices: Vec<usize> = (0..images.len()).collect();
                let mut out = Vec::with_capacity(images.len());
                for chunk in indices.chunks(64) {
                    let batch = images.stack(chunk);
                    out.extend(ensemble.predict(&batch)?);
                }
                Ok(out)
            }
        }
    }

    /// Builds the composed graph for an image batch. When `cached_cues` is
    /// given it enters as a constant leaf; otherwise the cue source runs
    /// in-graph and is wrapped in `stop_gradient`, so either way no
    /// gradient can reach it.
    pub fn trace_batch(
        &self,
        batch: &Tensor,
        cached_cues: Option<&Tensor>,
    ) -> Result<KdlTrace, KdlError> {
        let n = batch.shape()[0];
        let mut graph = Graph::new();
        let input = graph.constant(batch.shape().to_vec(), batch.data().to_vec());
        let (_, student_out, student_params, student_taps) =
            self.student.forward_on(&mut graph, input)?;

        let mut cue_taps = Vec::new();
        let cue = match (cached_cues, &self.cue_source) {
            (Some(cues), _) => {
                if cues.shape() != [n, self.cue_source.width()] {
                    return Err(KdlError::WidthMismatch(format!(
                        "cached cue shape {:?} for batch of {n}",
                        cues.shape()
                    )));
                }
                graph.constant(cues.shape().to_vec(), cues.data().to_vec())
            }
            (None, CueSource::Constant(v)) => {
                let mut data = Vec::with_capacity(n * v.len());
                for _ in 0..n {
                    data.extend_from_slice(v);
                }
                graph.constant(vec![n, v.len()], data)
            }
            (None, CueSource::Ensemble(ensemble)) => {
                let mut outs = Vec::with_capacity(ensemble.n());
                for (i, (_, expert)) in ensemble.experts.iter().enumerate() {
                    let (_, probs, _, taps) = expert.forward_on(&mut graph, input)?;
                    cue_taps.extend(
                        taps.into_iter()
                            .map(|(name, id)| (format!("expert{i}.{name}"), id)),
                    );
                    outs.push(probs);
                }
                let concat = graph.concat(&outs, 1)?;
                let (_, ec_probs, _, _) = ensemble.head.forward_on(&mut graph, concat)?;
                graph.stop_gradient(ec_probs)
            }
        };

        let joined = graph.concat(&[student_out, cue], 1)?;
        let (head_logits, head_out, head_params, _) = self.head.forward_on(&mut graph, joined)?;
        Ok(KdlTrace {
            graph,
            logits: head_logits,
            output: head_out,
            student_taps,
            student_params,
            head_params,
            cue,
            cue_taps,
        })
    }

    /// Probability pairs for an image batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>, KdlError> {
        let trace = self.trace_batch(batch, None)?;
        Ok(trace
            .graph
            .value(trace.output)
            .chunks(2)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Serialized consult parameters, for frozen-byte comparisons; empty for
    /// a constant cue.
    pub fn cue_bytes(&self) -> Vec<Vec<u8>> {
        match &self.cue_source {
            CueSource::Ensemble(e) => {
                let mut all = e.expert_bytes();
                all.push(e.head.params_bytes());
                all
            }
            CueSource::Constant(_) => Vec::new(),
        }
    }
}

impl Trainable for KdlModel {
    fn trainable_params(&self) -> Vec<&Param> {
        self.student
            .params()
            .iter()
            .chain(self.head.params().iter())
            .collect()
    }

    fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        self.student
            .params_mut()
            .iter_mut()
            .chain(self.head.params_mut().iter_mut())
            .collect()
    }

    fn forward_batch(&self, data: &DataSet, indices: &[usize]) -> Result<BatchTrace, TensorError> {
        let batch = data.stack(indices);
        let cues = data.stack_aux(indices);
        let trace = self
            .trace_batch(&batch, cues.as_ref())
            .map_err(|e| match e {
                KdlError::Tensor(t) => t,
                other => TensorError::InvalidShape {
                    op: "kdl forward",
                    shape: batch.shape().to_vec(),
                    reason: other.to_string(),
                },
            })?;
        let n_student = trace.student_params.len();
        let mut bindings: Vec<(usize, NodeId)> = trace
            .student_params
            .iter()
            .enumerate()
            .map(|(i, &n)| (i, n))
            .collect();
        bindings.extend(
            trace
                .head_params
                .iter()
                .enumerate()
                .map(|(i, &n)| (n_student + i, n)),
        );
        Ok(BatchTrace {
            graph: trace.graph,
            logits: trace.logits,
            bindings,
        })
    }
}

/// Trains student and head with the cue precomputed per sample (the consult
/// is frozen, so its outputs cannot drift mid-run).
pub fn train_kdl(
    model: &mut KdlModel,
    train_images: &DataSet,
    val_images: &DataSet,
    config: &TrainConfig,
) -> Result<TrainHistory, KdlError> {
    let cue_train = model.cues_for(train_images)?;
    let cue_val = model.cues_for(val_images)?;
    let train_set = train_images.clone().with_aux(cue_train);
    let val_set = val_images.clone().with_aux(cue_val);
    Ok(train(model, &train_set, &val_set, config)?)
}

/// On-disk description of a KDL bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KdlDescriptor {
    pub cue_join: CueJoin,
    pub head_sizes: (usize, usize),
    /// FNV-1a content hash of the consult bundle this model was trained
    /// against; loading verifies it.
    pub consult_hash: String,
    pub input_mode: String,
    pub resolution: usize,
}

/// FNV-1a over every regular file in a directory, in sorted name order.
pub fn dir_content_hash(dir: &Path) -> Result<String, std::io::Error> {
    let mut names: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for path in names {
        feed(path.file_name().unwrap_or_default().as_encoded_bytes());
        feed(&std::fs::read(&path)?);
    }
    Ok(format!("{hash:016x}"))
}

/// Writes `student.{fct,json}`, `head.{fct,json}`, and `kdl.json`.
pub fn save_kdl(
    dir: &Path,
    model: &KdlModel,
    descriptor: &KdlDescriptor,
    history: Option<&TrainHistory>,
) -> Result<(), KdlError> {
    std::fs::create_dir_all(dir)?;
    crate::nn::save_model(&dir.join("student"), &model.student, None, history)?;
    crate::nn::save_model(&dir.join("head"), &model.head, None, None)?;
    std::fs::write(
        dir.join("kdl.json"),
        serde_json::to_string_pretty(descriptor).expect("descriptor serializes"),
    )?;
    Ok(())
}

/// Loads a KDL bundle, re-attaching the given cue source. When the source
/// is a consult loaded from `consult_dir`, its content hash must match the
/// one recorded at save time.
pub fn load_kdl(
    dir: &Path,
    cue_source: CueSource,
    consult_dir: Option<&Path>,
) -> Result<(KdlModel, KdlDescriptor), KdlError> {
    let descriptor: KdlDescriptor =
        serde_json::from_str(&std::fs::read_to_string(dir.join("kdl.json"))?)
            .map_err(|e| KdlError::Bundle(format!("kdl.json: {e}")))?;
    if let Some(consult_dir) = consult_dir {
        let hash = dir_content_hash(consult_dir)?;
        if hash != descriptor.consult_hash {
            return Err(KdlError::Bundle(format!(
                "consult bundle hash {hash} does not match recorded {}",
                descriptor.consult_hash
            )));
        }
    }
    let (student, _) = crate::nn::load_model(&dir.join("student"))?;
    let (head, _) = crate::nn::load_model(&dir.join("head"))?;
    Ok((
        KdlModel {
            student,
            cue_source,
            head,
            cue_join: descriptor.cue_join,
            head_sizes: descriptor.head_sizes,
        },
        descriptor,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{build_consult, ExpertFamily, ExpertTopology};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn image_set(n: usize, seed: u64) -> DataSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let label = rng.random_bool(0.5) as usize;
            let base = if label == 1 { 0.7 } else { 0.3 };
            let data = (0..256)
                .map(|_| base + rng.random_range(-0.2..0.2))
                .collect();
            inputs.push(Tensor::new(vec![1, 16, 16], data).unwrap());
            labels.push(label);
        }
        DataSet::new(inputs, labels)
    }

    fn tiny_ensemble(seed: u64) -> ConsultEnsemble {
        let experts = ExpertFamily::ALL[..2]
            .iter()
            .map(|&f| (f, ExpertTopology::for_family(f).build(1, 16, seed).unwrap()))
            .collect();
        build_consult(experts, (8, 4), seed).unwrap()
    }

    fn tiny_student(seed: u64, cue_join: CueJoin) -> ModelGraph {
        ModelGraph::build(
            student_layers(8, cue_join),
            InputShape::spatial(1, 16, 16),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn head_input_is_student_width_plus_cue_width() {
        let student = tiny_student(1, CueJoin::Features);
        let model = build_kdl(
            student,
            CueSource::Ensemble(tiny_ensemble(2)),
            (8, 4),
            CueJoin::Features,
            3,
        )
        .unwrap();
        assert_eq!(model.head_input_width(), 10);
        assert_eq!(model.head.input_shape, InputShape::flat(10));

        let student = tiny_student(1, CueJoin::Probabilities);
        let model = build_kdl(
            student,
            CueSource::Ensemble(tiny_ensemble(2)),
            (8, 4),
            CueJoin::Probabilities,
            3,
        )
        .unwrap();
        assert_eq!(model.head_input_width(), 4);
    }

    #[test]
    fn consult_sizes_three_five_seven_all_compose() {
        // The cue is always the consult's 2-vector, whatever its size.
        for n in [3usize, 5, 7] {
            let experts = (0..n)
                .map(|i| {
                    let family = ExpertFamily::ALL[i % ExpertFamily::ALL.len()];
                    (family, ExpertTopology::for_family(family).build(1, 16, 70 + i as u64).unwrap())
                })
                .collect();
            let ensemble = build_consult(experts, (8, 4), 71).unwrap();
            let model = build_kdl(
                tiny_student(72, CueJoin::Features),
                CueSource::Ensemble(ensemble),
                (8, 4),
                CueJoin::Features,
                73,
            )
            .unwrap();
            assert_eq!(model.head_input_width(), 10);
            let set = image_set(2, 74);
            let probs = model.predict(&set.stack(&[0, 1])).unwrap();
            for row in probs {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn predictions_sum_to_one_and_match_batched_vs_solo() {
        let model = build_kdl(
            tiny_student(5, CueJoin::Features),
            CueSource::Ensemble(tiny_ensemble(6)),
            (8, 4),
            CueJoin::Features,
            7,
        )
        .unwrap();
        let set = image_set(4, 8);
        let batch = set.stack(&[0, 1, 2, 3]);
        let batched = model.predict(&batch).unwrap();
        for (i, row) in batched.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let solo = model.predict(&set.stack(&[i])).unwrap();
            for (a, b) in row.iter().zip(&solo[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cached_and_in_graph_cues_agree() {
        let model = build_kdl(
            tiny_student(11, CueJoin::Features),
            CueSource::Ensemble(tiny_ensemble(12)),
            (8, 4),
            CueJoin::Features,
            13,
        )
        .unwrap();
        let set = image_set(3, 14);
        let batch = set.stack(&[0, 1, 2]);
        let cues = model.cues_for(&set).unwrap();
        let cue_tensor = Tensor::new(vec![3, 2], cues.concat()).unwrap();
        let cached = model.trace_batch(&batch, Some(&cue_tensor)).unwrap();
        let in_graph = model.trace_batch(&batch, None).unwrap();
        let a = cached.graph.value(cached.output);
        let b = in_graph.graph.value(in_graph.output);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn no_gradient_reaches_the_consult() {
        let model = build_kdl(
            tiny_student(21, CueJoin::Features),
            CueSource::Ensemble(tiny_ensemble(22)),
            (8, 4),
            CueJoin::Features,
            23,
        )
        .unwrap();
        let set = image_set(2, 24);
        let batch = set.stack(&[0, 1]);
        let mut trace = model.trace_batch(&batch, None).unwrap();
        let loss = trace
            .graph
            .weighted_cross_entropy(trace.logits, &[0, 1], &[0.2, 1.0])
            .unwrap();
        let total = trace.graph.sum(loss);
        trace.graph.backward(total, &Tensor::scalar(1.0)).unwrap();
        // Cue node (stop_gradient) has no grad; every student and head
        // parameter has one.
        assert!(trace.graph.grad(trace.cue).is_none());
        for &p in trace.student_params.iter().chain(&trace.head_params) {
            assert!(trace.graph.grad(p).is_some());
        }
    }

    #[test]
    fn one_training_step_leaves_consult_byte_identical() {
        let mut model = build_kdl(
            tiny_student(31, CueJoin::Features),
            CueSource::Ensemble(tiny_ensemble(32)),
            (8, 4),
            CueJoin::Features,
            33,
        )
        .unwrap();
        let before = model.cue_bytes();
        let set = image_set(16, 34);
        let config = TrainConfig {
            learning_rate: 0.01,
            batch_size: 8,
            max_epochs: 2,
            class_weights: vec![0.2, 1.0],
            early_stop_patience: 1,
            early_stop_min_delta: 0.0,
            seed: 35,
        };
        train_kdl(&mut model, &set, &set, &config).unwrap();
        assert_eq!(before, model.cue_bytes());
    }

    #[test]
    fn constant_cue_matches_ensemble_forced_to_a_constant() {
        // An ensemble whose head always emits the same pair must train
        // identically to a literal constant cue with the same value.
        let ensemble = {
            let mut e = tiny_ensemble(41);
            // Zero the head's dense layers so softmax emits (0.5, 0.5)
            // whatever the experts say.
            for p in e.head.params_mut() {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            }
            e
        };
        let config = TrainConfig {
            learning_rate: 0.02,
            batch_size: 8,
            max_epochs: 4,
            class_weights: vec![1.0, 1.0],
            early_stop_patience: 3,
            early_stop_min_delta: 0.0,
            seed: 45,
        };
        let train_set = image_set(24, 42);
        let val_set = image_set(8, 43);

        let mut guided = build_kdl(
            tiny_student(44, CueJoin::Features),
            CueSource::Ensemble(ensemble),
            (8, 4),
            CueJoin::Features,
            46,
        )
        .unwrap();
        let h_guided = train_kdl(&mut guided, &train_set, &val_set, &config).unwrap();

        let mut constant = build_kdl(
            tiny_student(44, CueJoin::Features),
            CueSource::Constant(vec![0.5, 0.5]),
            (8, 4),
            CueJoin::Features,
            46,
        )
        .unwrap();
        let h_constant = train_kdl(&mut constant, &train_set, &val_set, &config).unwrap();

        for (a, b) in h_guided.epochs.iter().zip(&h_constant.epochs) {
            assert!((a.train_loss - b.train_loss).abs() < 1e-9);
            assert!((a.val_loss - b.val_loss).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_cue_reaches_near_zero_val_loss_fast() {
        // Hand the answer to the head: cue = one-hot truth. The head can
        // read it off within a few epochs.
        let train_set = image_set(32, 51);
        let val_set = image_set(16, 52);
        let mut model = build_kdl(
            tiny_student(53, CueJoin::Features),
            CueSource::Constant(vec![0.0, 0.0]),
            (8, 4),
            CueJoin::Features,
            54,
        )
        .unwrap();
        let oracle = |set: &DataSet| {
            set.labels
                .iter()
                .map(|&l| if l == 1 { vec![0.0, 1.0] } else { vec![1.0, 0.0] })
                .collect::<Vec<_>>()
        };
        let train_aux = train_set.clone().with_aux(oracle(&train_set));
        let val_aux = val_set.clone().with_aux(oracle(&val_set));
        let config = TrainConfig {
            learning_rate: 0.05,
            batch_size: 8,
            max_epochs: 5,
            class_weights: vec![1.0, 1.0],
            early_stop_patience: 4,
            early_stop_min_delta: 0.0,
            seed: 55,
        };
        let history = train(&mut model, &train_aux, &val_aux, &config).unwrap();
        let best = history
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.05, "best val loss {best} should be near zero");
        let acc = history
            .epochs
            .last()
            .map(|e| e.val_accuracy)
            .unwrap_or_default();
        assert!(acc >= 0.9, "oracle cue accuracy {acc}");
    }

    #[test]
    fn bundle_round_trips_with_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let consult_dir = dir.path().join("ec");
        let ensemble = tiny_ensemble(61);
        let descriptor = crate::experts::EnsembleDescriptor {
            n: 2,
            families: ensemble
                .experts
                .iter()
                .map(|(f, _)| f.name().to_string())
                .collect(),
            head_sizes: (8, 4),
            selection_scores: vec![0.7, 0.6],
            finetune_patients: vec![],
            freeze_fraction: 0.0,
            input_mode: "fused".into(),
            resolution: 16,
        };
        crate::experts::save_ensemble(&consult_dir, &ensemble, &descriptor).unwrap();
        let hash = dir_content_hash(&consult_dir).unwrap();

        let model = build_kdl(
            tiny_student(62, CueJoin::Features),
            CueSource::Ensemble(ensemble),
            (8, 4),
            CueJoin::Features,
            63,
        )
        .unwrap();
        let kdl_dir = dir.path().join("kdl");
        let kdesc = KdlDescriptor {
            cue_join: CueJoin::Features,
            head_sizes: (8, 4),
            consult_hash: hash,
            input_mode: "fused".into(),
            resolution: 16,
        };
        save_kdl(&kdl_dir, &model, &kdesc, None).unwrap();

        let (loaded_ec, _) = crate::experts::load_ensemble(&consult_dir).unwrap();
        let (loaded, _) = load_kdl(
            &kdl_dir,
            CueSource::Ensemble(loaded_ec),
            Some(&consult_dir),
        )
        .unwrap();
        let set = image_set(2, 64);
        let batch = set.stack(&[0, 1]);
        assert_eq!(
            loaded.predict(&batch).unwrap(),
            model.predict(&batch).unwrap()
        );

        // Tampering with the consult bundle breaks the hash check.
        std::fs::write(consult_dir.join("descriptor.json"), "{}").unwrap();
        let (tampered_ec, _) = crate::experts::load_ensemble(&consult_dir)
            .err()
            .map(|_| (tiny_ensemble(61), ()))
            .unwrap();
        let err = load_kdl(
            &kdl_dir,
            CueSource::Ensemble(tampered_ec),
            Some(&consult_dir),
        )
        .unwrap_err();
        assert!(matches!(err, KdlError::Bundle(_)));
    }
}
