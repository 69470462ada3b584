//! Expert networks and the experts-consult (EC) stacking ensemble.
//!
//! Six toy topologies, one per architectural family, are pretrained on a
//! procedural texture proxy task, fine-tuned on nodule data with a frozen
//! layer prefix, and stacked: the n experts' predictions are concatenated
//! and re-elaborated by three dense layers. Training the stack never
//! touches the experts.

mod proxy;

pub use proxy::proxy_texture_set;

use crate::nn::{
    train, CheckpointError, DataSet, InputShape, LayerSpec, ModelGraph, ModelError, TrainConfig,
    TrainError, TrainHistory,
};
use crate::seed::derive;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum ExpertError {
    /// An ensemble needs at least two members.
    TooFewExperts(usize),
    InputMismatch(String),
    Model(ModelError),
    Train(TrainError),
    Tensor(TensorError),
    Checkpoint(CheckpointError),
    Bundle(String),
    Io(std::io::Error),
}

impl fmt::Display for ExpertError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertError::TooFewExperts(n) => write!(f, "consult needs at least 2 experts, got {n}"),
            ExpertError::InputMismatch(m) => write!(f, "expert input mismatch: {m}"),
            ExpertError::Model(e) => write!(f, "{e}"),
            ExpertError::Train(e) => write!(f, "{e}"),
            ExpertError::Tensor(e) => write!(f, "{e}"),
            ExpertError::Checkpoint(e) => write!(f, "{e}"),
            ExpertError::Bundle(m) => write!(f, "ensemble bundle: {m}"),
            ExpertError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for ExpertError {}

impl From<ModelError> for ExpertError {
    fn from(e: ModelError) -> Self {
        ExpertError::Model(e)
    }
}

impl From<TrainError> for ExpertError {
    fn from(e: TrainError) -> Self {
        ExpertError::Train(e)
    }
}

impl From<TensorError> for ExpertError {
    fn from(e: TensorError) -> Self {
        ExpertError::Tensor(e)
    }
}

impl From<CheckpointError> for ExpertError {
    fn from(e: CheckpointError) -> Self {
        ExpertError::Checkpoint(e)
    }
}

impl From<std::io::Error> for ExpertError {
    fn from(e: std::io::Error) -> Self {
        ExpertError::Io(e)
    }
}

/// The six architectural families, echoing the lineup of classic ImageNet
/// classifiers at toy scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertFamily {
    PlainShallow,
    PlainDeep,
    Residual,
    GroupedResidual,
    MultiBranch,
    DenselyConnected,
}

impl ExpertFamily {
    pub const ALL: [ExpertFamily; 6] = [
        ExpertFamily::PlainShallow,
        ExpertFamily::PlainDeep,
        ExpertFamily::Residual,
        ExpertFamily::GroupedResidual,
        ExpertFamily::MultiBranch,
        ExpertFamily::DenselyConnected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExpertFamily::PlainShallow => "plain_shallow",
            ExpertFamily::PlainDeep => "plain_deep",
            ExpertFamily::Residual => "residual",
            ExpertFamily::GroupedResidual => "grouped_residual",
            ExpertFamily::MultiBranch => "multi_branch",
            ExpertFamily::DenselyConnected => "densely_connected",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|f| f.name() == name)
    }
}

impl fmt::Display for ExpertFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Expert architecture: a learned input-normalization conv, a family body,
/// and a dense softmax head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertTopology {
    pub family: ExpertFamily,
    pub input_norm_conv: LayerSpec,
    pub body: Vec<LayerSpec>,
    pub head_units: usize,
}

fn conv(out_channels: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        out_channels,
        kernel: 3,
        stride: 1,
        padding: 1,
    }
}

impl ExpertTopology {
    /// Standard toy topology of a family. Bodies end with two pooling
    /// stages, so inputs of 16x16 and up work.
    pub fn for_family(family: ExpertFamily) -> Self {
        use LayerSpec::{Concat, DenseBlock, MaxPool2, Relu};
        let skip =
            |channels: usize| Concat { branches: vec![vec![], vec![conv(channels), Relu]] };
        let grouped = |channels: usize| Concat {
            branches: vec![
                vec![],
                vec![conv(channels), Relu],
                vec![conv(channels), Relu],
            ],
        };
        let body = match family {
            ExpertFamily::PlainShallow => vec![
                conv(8),
                Relu,
                MaxPool2,
                conv(12),
                Relu,
                MaxPool2,
            ],
            ExpertFamily::PlainDeep => vec![
                conv(8),
                Relu,
                conv(8),
                Relu,
                MaxPool2,
                conv(12),
                Relu,
                conv(12),
                Relu,
                MaxPool2,
            ],
            ExpertFamily::Residual => vec![
                conv(8),
                Relu,
                skip(8),
                MaxPool2,
                skip(8),
                MaxPool2,
            ],
            ExpertFamily::GroupedResidual => vec![
                conv(8),
                Relu,
                grouped(4),
                MaxPool2,
                grouped(4),
                MaxPool2,
            ],
            ExpertFamily::MultiBranch => vec![
                conv(8),
                Relu,
                MaxPool2,
                Concat {
                    branches: vec![
                        vec![LayerSpec::Conv2d {
                            out_channels: 4,
                            kernel: 1,
                            stride: 1,
                            padding: 0,
                        }, Relu],
                        vec![conv(4), Relu],
                        vec![conv(4), Relu, conv(4), Relu],
                    ],
                },
                MaxPool2,
            ],
            ExpertFamily::DenselyConnected => vec![
                DenseBlock { layers: 4, growth: 8 },
                MaxPool2,
                DenseBlock { layers: 2, growth: 8 },
                MaxPool2,
            ],
        };
        ExpertTopology {
            family,
            input_norm_conv: LayerSpec::InputNormConv { out_channels: 8 },
            body,
            head_units: 2,
        }
    }

    pub fn with_head_units(mut self, units: usize) -> Self {
        self.head_units = units;
        self
    }

    /// Full layer list: input norm, body, global pooling, dense softmax head.
    pub fn to_layers(&self) -> Vec<LayerSpec> {
        let mut layers = vec![self.input_norm_conv.clone()];
        layers.extend(self.body.iter().cloned());
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Dense {
            units: self.head_units,
        });
        layers.push(LayerSpec::Softmax);
        layers
    }

    pub fn build(
        &self,
        channels: usize,
        resolution: usize,
        seed: u64,
    ) -> Result<ModelGraph, ModelError> {
        ModelGraph::build(
            self.to_layers(),
            InputShape::spatial(channels, resolution, resolution),
            seed,
        )
    }
}

/// Trains an expert on the multi-class proxy texture task; the returned
/// model keeps the proxy head (fine-tuning swaps it for a 2-unit one).
pub fn pretrain_expert(
    topology: &ExpertTopology,
    proxy_train: &DataSet,
    proxy_val: &DataSet,
    config: &TrainConfig,
) -> Result<(ModelGraph, TrainHistory), ExpertError> {
    let classes = proxy_train
        .labels
        .iter()
        .chain(&proxy_val.labels)
        .max()
        .map_or(0, |&m| m + 1);
    let shape = proxy_train.inputs[0].shape();
    let topology = topology.clone().with_head_units(classes);
    let mut model = topology.build(shape[0], shape[1], derive(config.seed, &[0xbe]))?;
    let history = train(&mut model, proxy_train, proxy_val, config)?;
    Ok((model, history))
}

/// Fine-tunes a pretrained expert: freezes the first `freeze_fraction` of
/// its parameterized layers, swaps the head for a fresh 2-unit one, and
/// trains on the nodule task. The frozen prefix stays bit-identical.
pub fn finetune_expert(
    pretrained: &ModelGraph,
    freeze_fraction: f64,
    train_set: &DataSet,
    val_set: &DataSet,
    config: &TrainConfig,
) -> Result<(ModelGraph, TrainHistory), ExpertError> {
    let mut model = pretrained.clone();
    model.freeze(freeze_fraction);
    let mut model = model.swap_head(2, derive(config.seed, &[0xf1]))?;
    let history = train(&mut model, train_set, val_set, config)?;
    Ok((model, history))
}

/// A frozen stack of experts with a trainable 3-layer dense head over their
/// concatenated predictions.
#[derive(Debug, Clone)]
pub struct ConsultEnsemble {
    pub experts: Vec<(ExpertFamily, ModelGraph)>,
    pub head: ModelGraph,
    pub head_sizes: (usize, usize),
}

impl ConsultEnsemble {
    pub fn n(&self) -> usize {
        self.experts.len()
    }

    /// Concatenated expert probability pairs for a `[n, c, h, w]` batch:
    /// shape `[n, 2 * experts]`.
    pub fn expert_outputs(&self, batch: &Tensor) -> Result<Tensor, ExpertError> {
        let n = batch.shape()[0];
        let mut per_expert = Vec::with_capacity(self.experts.len());
        for (_, expert) in &self.experts {
            let probs = expert.forward_probs(batch)?;
            per_expert.push(probs);
        }
        let width = 2 * self.experts.len();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for probs in &per_expert {
                data.extend_from_slice(&probs[i]);
            }
        }
        Ok(Tensor::new(vec![n, width], data).expect("expert output width"))
    }

    /// Precomputed cue inputs for every sample of an image set; experts are
    /// frozen, so this is valid for a whole training run.
    pub fn cue_set(&self, images: &DataSet) -> Result<DataSet, ExpertError> {
        let indices: Vec<usize> = (0..images.len()).collect();
        let mut inputs = Vec::with_capacity(images.len());
        for chunk in indices.chunks(64) {
            let batch = images.stack(chunk);
            let outs = self.expert_outputs(&batch)?;
            let width = outs.shape()[1];
            for row in outs.data().chunks(width) {
                inputs.push(Tensor::new(vec![width], row.to_vec()).expect("cue row"));
            }
        }
        Ok(DataSet::new(inputs, images.labels.clone()))
    }

    /// Ensemble probability pairs for a batch of images.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>, ExpertError> {
        let cues = self.expert_outputs(batch)?;
        Ok(self.head.forward_probs(&cues)?)
    }

    /// Serialized expert parameters, for byte-identity snapshots.
    pub fn expert_bytes(&self) -> Vec<Vec<u8>> {
        self.experts.iter().map(|(_, m)| m.params_bytes()).collect()
    }
}

/// Builds the stacking ensemble: freezes every expert parameter and creates
/// the dense(h1)+relu, dense(h2)+relu, dense(2)+softmax head over the
/// concatenated predictions.
pub fn build_consult(
    experts: Vec<(ExpertFamily, ModelGraph)>,
    head_sizes: (usize, usize),
    seed: u64,
) -> Result<ConsultEnsemble, ExpertError> {
    if experts.len() < 2 {
        return Err(ExpertError::TooFewExperts(experts.len()));
    }
    let first_shape = experts[0].1.input_shape;
    for (family, model) in &experts {
        if model.input_shape != first_shape {
            return Err(ExpertError::InputMismatch(format!(
                "{family} expects {:?}, ensemble expects {first_shape:?}",
                model.input_shape
            )));
        }
        if model.output_width() != 2 {
            return Err(ExpertError::InputMismatch(format!(
                "{family} emits {} outputs, experts must emit 2",
                model.output_width()
            )));
        }
    }
    let mut experts = experts;
    for (_, model) in &mut experts {
        model.freeze(1.0);
    }
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
        InputShape::flat(2 * experts.len()),
        derive(seed, &[0xec]),
    )?;
    Ok(ConsultEnsemble {
        experts,
        head,
        head_sizes,
    })
}

/// Trains only the stacking head. Expert outputs are computed once per set
/// (the experts are frozen, so they cannot drift mid-run) and the head
/// trains on those cue vectors.
pub fn train_consult(
    ensemble: &mut ConsultEnsemble,
    train_images: &DataSet,
    val_images: &DataSet,
    config: &TrainConfig,
) -> Result<TrainHistory, ExpertError> {
    let cue_train = ensemble.cue_set(train_images)?;
    let cue_val = ensemble.cue_set(val_images)?;
    let history = train(&mut ensemble.head, &cue_train, &cue_val, config)?;
    Ok(history)
}

/// Ranks fine-tuned candidates by validation accuracy (descending, ties by
/// listed order) and returns the indices of the top `n`.
pub fn select_for_consult(
    candidates: &[(ExpertFamily, f64)],
    n: usize,
) -> Result<Vec<usize>, ExpertError> {
    if candidates.len() < n {
        return Err(ExpertError::Bundle(format!(
            "{} candidates for an EC-{n}; train more expert instances",
            candidates.len()
        )));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .1
            .partial_cmp(&candidates[a].1)
            .expect("finite accuracies")
            .then(a.cmp(&b))
    });
    order.truncate(n);
    Ok(order)
}

/// On-disk description of an ensemble bundle directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleDescriptor {
    pub n: usize,
    pub families: Vec<String>,
    pub head_sizes: (usize, usize),
    /// Validation accuracy each member scored when selected.
    pub selection_scores: Vec<f64>,
    /// Patients whose images fine-tuned the members; used to refuse
    /// evaluation sets that share patients with the consult's training data.
    pub finetune_patients: Vec<String>,
    pub freeze_fraction: f64,
    pub input_mode: String,
    pub resolution: usize,
}

/// Writes `expert_<i>.{fct,json}`, `head.{fct,json}`, and
/// `descriptor.json` into `dir`.
pub fn save_ensemble(
    dir: &Path,
    ensemble: &ConsultEnsemble,
    descriptor: &EnsembleDescriptor,
) -> Result<(), ExpertError> {
    std::fs::create_dir_all(dir)?;
    for (i, (_, model)) in ensemble.experts.iter().enumerate() {
        crate::nn::save_model(&dir.join(format!("expert_{i}")), model, None, None)?;
    }
    crate::nn::save_model(&dir.join("head"), &ensemble.head, None, None)?;
    std::fs::write(
        dir.join("descriptor.json"),
        serde_json::to_string_pretty(descriptor).expect("descriptor serializes"),
    )?;
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<(ConsultEnsemble, EnsembleDescriptor), ExpertError> {
    let descriptor: EnsembleDescriptor = serde_json::from_str(
        &std::fs::read_to_string(dir.join("descriptor.json"))?,
    )
    .map_err(|e| ExpertError::Bundle(format!("descriptor: {e}")))?;
    let mut experts = Vec::with_capacity(descriptor.n);
    for (i, family_name) in descriptor.families.iter().enumerate() {
        let family = ExpertFamily::from_name(family_name)
            .ok_or_else(|| ExpertError::Bundle(format!("unknown family {family_name}")))?;
        let (model, _) = crate::nn::load_model(&dir.join(format!("expert_{i}")))?;
        experts.push((family, model));
    }
    let (head, _) = crate::nn::load_model(&dir.join("head"))?;
    let head_sizes = descriptor.head_sizes;
    Ok((
        ConsultEnsemble {
            experts,
            head,
            head_sizes,
        },
        descriptor,
    ))
}
