//! Layer vocabulary, model assembly, and parameter freezing: the pieces the
//! experts, the stacking head, and the cue-guided student are built from.

mod checkpoint;
mod train;

pub use checkpoint::{load_model, save_model, CheckpointError, ModelSidecar};
pub use train::{
    evaluate, predict_probs, train, weighted_bce, Adam, BatchTrace, DataSet, EarlyStopping,
    EpochStats, StopDecision, Trainable, TrainConfig, TrainError, TrainHistory,
};

use crate::seed::derive;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// One layer of a sequential network body. `Concat` runs parallel branches
/// on its input and joins them channel-wise (an empty branch is the
/// identity, which is how skip connections are expressed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    Softmax,
    GlobalAvgPool,
    MaxPool2,
    Concat {
        branches: Vec<Vec<LayerSpec>>,
    },
    /// Densely connected block: each inner 3x3 conv sees the concatenation
    /// of the block input and every previous inner output, so the output
    /// carries `input + layers * growth` channels.
    DenseBlock {
        layers: usize,
        growth: usize,
    },
    /// 1x1 conv that mixes the stacked modalities into a learned
    /// normalization of the input.
    InputNormConv {
        out_channels: usize,
    },
}

/// What a model consumes: a `[n, c, h, w]` image batch or a `[n, f]`
/// feature batch (stacking heads take the latter).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat { f: usize },
}

impl InputShape {
    pub fn spatial(c: usize, h: usize, w: usize) -> Self {
        InputShape::Spatial { c, h, w }
    }

    pub fn flat(f: usize) -> Self {
        InputShape::Flat { f }
    }

    fn feat(self) -> Feat {
        match self {
            InputShape::Spatial { c, h, w } => Feat::Spatial { c, h, w },
            InputShape::Flat { f } => Feat::Flat { f },
        }
    }
}

/// A named parameter tensor with its trainability flag.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Either a spatial `[n, c, h, w]` or a flat `[n, f]` activation during
/// shape inference and forward traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Feat {
    Spatial { c: usize, h: usize, w: usize },
    Flat { f: usize },
}

#[derive(Debug)]
pub enum ModelError {
    Build(String),
    Tensor(TensorError),
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::Build(m) => write!(f, "model build: {m}"),
            ModelError::Tensor(e) => write!(f, "model: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// A composed network: ordered layer specs plus their named parameters and
/// per-parameter trainability.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub input_shape: InputShape,
    pub freeze_fraction: f64,
    params: Vec<Param>,
    /// Per parameterized layer (topological order): range into `params`.
    layer_param_ranges: Vec<(usize, usize)>,
}

/// Result of one forward construction over a batch.
pub struct ForwardTrace {
    pub graph: Graph,
    /// Output of the network *before* a trailing `Softmax` layer, if any.
    pub logits: NodeId,
    /// Final output (softmax applied when the layer list ends with one).
    pub output: NodeId,
    /// Leaf node per parameter, parallel to the model's parameter list.
    pub param_nodes: Vec<NodeId>,
    /// Spatial activations in layer order (`name`, node), recorded after
    /// each conv-bearing layer with a `[n, c, h, w]` output (pooled copies
    /// are skipped). Grad-CAM reads these.
    pub spatial_taps: Vec<(String, NodeId)>,
}

struct ParamBuilder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
    ranges: Vec<(usize, usize)>,
}

impl ParamBuilder {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, kh: usize, kw: usize) {
        let fan_in = (cin * kh * kw) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("he std");
        let n = cout * cin * kh * kw;
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        let start = self.params.len();
        self.params.push(Param {
            name: format!("{name}.weight"),
            value: Tensor::new(vec![cout, cin, kh, kw], data).expect("conv weight shape"),
            trainable: true,
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            value: Tensor::zeros(vec![cout]),
            trainable: true,
        });
        self.ranges.push((start, start + 2));
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) {
        let normal = Normal::new(0.0, (2.0 / fin as f64).sqrt()).expect("he std");
        let data: Vec<f64> = (0..fin * fout).map(|_| normal.sample(&mut self.rng)).collect();
        let start = self.params.len();
        self.params.push(Param {
            name: format!("{name}.weight"),
            value: Tensor::new(vec![fin, fout], data).expect("dense weight shape"),
            trainable: true,
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            value: Tensor::zeros(vec![fout]),
            trainable: true,
        });
        self.ranges.push((start, start + 2));
    }
}

/// Walks a layer list, inferring shapes and creating parameters.
fn plan(
    layers: &[LayerSpec],
    mut feat: Feat,
    prefix: &str,
    builder: &mut ParamBuilder,
) -> Result<Feat, ModelError> {
    for (i, layer) in layers.iter().enumerate() {
        let name = format!("{prefix}l{i}");
        feat = match (layer, feat) {
            (LayerSpec::InputNormConv { out_channels }, Feat::Spatial { c, h, w }) => {
                builder.conv(&name, *out_channels, c, 1, 1);
                Feat::Spatial {
                    c: *out_channels,
                    h,
                    w,
                }
            }
            (
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                Feat::Spatial { c, h, w },
            ) => {
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(ModelError::Build(format!(
                        "{name}: kernel {kernel} does not fit {h}x{w} with padding {padding}"
                    )));
                }
                builder.conv(&name, *out_channels, c, *kernel, *kernel);
                Feat::Spatial {
                    c: *out_channels,
                    h: (h + 2 * padding - kernel) / stride + 1,
                    w: (w + 2 * padding - kernel) / stride + 1,
                }
            }
            (LayerSpec::Dense { units }, Feat::Flat { f }) => {
                builder.dense(&name, f, *units);
                Feat::Flat { f: *units }
            }
            (LayerSpec::Relu | LayerSpec::Softmax, f) => f,
            (LayerSpec::GlobalAvgPool, Feat::Spatial { c, .. }) => Feat::Flat { f: c },
            (LayerSpec::MaxPool2, Feat::Spatial { c, h, w }) => {
                if h < 2 || w < 2 {
                    return Err(ModelError::Build(format!("{name}: {h}x{w} too small to pool")));
                }
                Feat::Spatial { c, h: h / 2, w: w / 2 }
            }
            (LayerSpec::Concat { branches }, Feat::Spatial { c, h, w }) => {
                let mut out_c = 0;
                let mut out_hw = None;
                for (b, branch) in branches.iter().enumerate() {
                    let sub = plan(
                        branch,
                        Feat::Spatial { c, h, w },
                        &format!("{name}.b{b}."),
                        builder,
                    )?;
                    match sub {
                        Feat::Spatial { c: bc, h: bh, w: bw } => {
                            if *out_hw.get_or_insert((bh, bw)) != (bh, bw) {
                                return Err(ModelError::Build(format!(
                                    "{name}: branch {b} spatial size {bh}x{bw} differs"
                                )));
                            }
                            out_c += bc;
                        }
                        Feat::Flat { .. } => {
                            return Err(ModelError::Build(format!(
                                "{name}: branch {b} must stay spatial"
                            )))
                        }
                    }
                }
                let (h, w) = out_hw.ok_or_else(|| {
                    ModelError::Build(format!("{name}: concat needs at least one branch"))
                })?;
                Feat::Spatial { c: out_c, h, w }
            }
            (LayerSpec::DenseBlock { layers: k, growth }, Feat::Spatial { c, h, w }) => {
                let mut channels = c;
                for j in 0..*k {
                    builder.conv(&format!("{name}.inner{j}"), *growth, channels, 3, 3);
                    channels += growth;
                }
                Feat::Spatial { c: channels, h, w }
            }
            (layer, feat) => {
                return Err(ModelError::Build(format!(
                    "{name}: {layer:?} cannot follow a {feat:?} activation"
                )))
            }
        };
    }
    Ok(feat)
}

impl ModelGraph {
    /// Builds a model with freshly initialized parameters (He-normal
    /// weights, zero biases), deterministic in `seed`.
    pub fn build(
        layers: Vec<LayerSpec>,
        input_shape: InputShape,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut builder = ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(derive(seed, &[0x1417])),
            params: Vec::new(),
            ranges: Vec::new(),
        };
        plan(&layers, input_shape.feat(), "", &mut builder)?;
        Ok(ModelGraph {
            layers,
            input_shape,
            freeze_fraction: 0.0,
            params: builder.params,
            layer_param_ranges: builder.ranges,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Output width of the network (units of the last dense layer).
    pub fn output_width(&self) -> usize {
        fn last_dense(layers: &[LayerSpec]) -> Option<usize> {
            layers.iter().rev().find_map(|l| match l {
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
        }
        last_dense(&self.layers).unwrap_or(0)
    }

    /// Number of parameterized layers, counting composite inner layers.
    pub fn parameterized_layers(&self) -> usize {
        self.layer_param_ranges.len()
    }

    /// Marks the first `ceil(fraction * L)` parameterized layers (topological
    /// order) non-trainable and the rest trainable. Idempotent.
    pub fn freeze(&mut self, fraction: f64) {
        let l = self.layer_param_ranges.len();
        let scaled = fraction.clamp(0.0, 1.0) * l as f64;
        let frozen = ((scaled - 1e-9).ceil().max(0.0) as usize).min(l);
        for (li, &(start, end)) in self.layer_param_ranges.iter().enumerate() {
            for p in &mut self.params[start..end] {
                p.trainable = li >= frozen;
            }
        }
        self.freeze_fraction = fraction;
    }

    /// Replaces the last dense layer with a freshly initialized one of
    /// `units` outputs (always trainable); all other parameters keep their
    /// values and trainability.
    pub fn swap_head(&self, units: usize, seed: u64) -> Result<ModelGraph, ModelError> {
        let mut layers = self.layers.clone();
        let pos = layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
            .ok_or_else(|| ModelError::Build("no dense head to swap".into()))?;
        layers[pos] = LayerSpec::Dense { units };
        let mut fresh = ModelGraph::build(layers, self.input_shape, seed)?;
        for p in fresh.params.iter_mut() {
            if let Some(old) = self
                .params
                .iter()
                .find(|o| o.name == p.name && o.value.shape() == p.value.shape())
            {
                p.value = old.value.clone();
                p.trainable = old.trainable;
            }
        }
        fresh.freeze_fraction = self.freeze_fraction;
        Ok(fresh)
    }

    /// Serialized parameter bytes (FCT1), for byte-identity comparisons.
    pub fn params_bytes(&self) -> Vec<u8> {
        let named: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.detach()))
            .collect();
        let mut buf = Vec::new();
        crate::tensor::write_container(&mut buf, &named).expect("in-memory write");
        buf
    }

    /// Runs this model's layers on an existing graph, starting from `input`.
    /// Returns (logits, output, param leaf nodes, spatial taps); callers
    /// composing several models share one graph this way.
    pub fn forward_on(
        &self,
        graph: &mut Graph,
        input: NodeId,
    ) -> Result<(NodeId, NodeId, Vec<NodeId>, Vec<(String, NodeId)>), TensorError> {
        let got = graph.shape(input).to_vec();
        let n = got.first().copied().unwrap_or(0);
        let expected: Vec<usize> = match self.input_shape {
            InputShape::Spatial { c, h, w } => vec![n, c, h, w],
            InputShape::Flat { f } => vec![n, f],
        };
        if got != expected {
            return Err(TensorError::ShapeMismatch {
                op: "model input",
                lhs: expected,
                rhs: got,
            });
        }
        let mut param_nodes = vec![NodeId(usize::MAX); self.params.len()];
        let mut next_param = 0usize;
        let mut taps = Vec::new();
        let out = run_layers(
            &self.layers,
            input,
            "",
            &self.params,
            &mut next_param,
            &mut param_nodes,
            graph,
            &mut taps,
        )?;
        debug_assert_eq!(next_param, self.params.len());
        Ok((out.logits, out.output, param_nodes, taps))
    }

    /// Builds the forward graph for a batch (`[n, c, h, w]` for spatial
    /// models, `[n, f]` for flat ones).
    pub fn forward_trace(&self, batch: &Tensor) -> Result<ForwardTrace, TensorError> {
        let mut graph = Graph::new();
        let input = graph.constant(batch.shape().to_vec(), batch.data().to_vec());
        let (logits, output, param_nodes, spatial_taps) = self.forward_on(&mut graph, input)?;
        Ok(ForwardTrace {
            logits,
            output,
            graph,
            param_nodes,
            spatial_taps,
        })
    }

    /// Class probabilities for a batch, through the trailing softmax.
    pub fn forward_probs(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>, TensorError> {
        let trace = self.forward_trace(batch)?;
        let k = trace.graph.shape(trace.output)[1];
        Ok(trace
            .graph
            .value(trace.output)
            .chunks(k)
            .map(<[f64]>::to_vec)
            .collect())
    }
}

struct LayerOut {
    logits: NodeId,
    output: NodeId,
}

/// Forward traversal mirroring `plan`; `next_param` walks the parameter
/// list in the same order the builder created it.
#[allow(clippy::too_many_arguments)]
fn run_layers(
    layers: &[LayerSpec],
    input: NodeId,
    prefix: &str,
    params: &[Param],
    next_param: &mut usize,
    param_nodes: &mut [NodeId],
    graph: &mut Graph,
    taps: &mut Vec<(String, NodeId)>,
) -> Result<LayerOut, TensorError> {
    let mut current = input;
    let mut logits = input;
    let take_param = |graph: &mut Graph, params: &[Param], next: &mut usize,
                          nodes: &mut [NodeId]| {
        let p = &params[*next];
        let mut t = p.value.detach();
        t.requires_grad = p.trainable;
        let id = graph.leaf(&t);
        nodes[*next] = id;
        *next += 1;
        id
    };
    for (i, layer) in layers.iter().enumerate() {
        let name = format!("{prefix}l{i}");
        current = match layer {
            LayerSpec::InputNormConv { .. } => {
                let weight = take_param(graph, params, next_param, param_nodes);
                let bias = take_param(graph, params, next_param, param_nodes);
                graph.conv2d(current, weight, Some(bias), 1, 0)?
            }
            LayerSpec::Conv2d { stride, padding, .. } => {
                let weight = take_param(graph, params, next_param, param_nodes);
                let bias = take_param(graph, params, next_param, param_nodes);
                graph.conv2d(current, weight, Some(bias), *stride, *padding)?
            }
            LayerSpec::Dense { .. } => {
                let weight = take_param(graph, params, next_param, param_nodes);
                let bias = take_param(graph, params, next_param, param_nodes);
                let h = graph.matmul(current, weight)?;
                graph.bias_add(h, bias)?
            }
            LayerSpec::Relu => graph.relu(current),
            LayerSpec::Softmax => graph.softmax(current),
            LayerSpec::GlobalAvgPool => graph.global_avg_pool(current)?,
            LayerSpec::MaxPool2 => graph.max_pool2(current)?,
            LayerSpec::Concat { branches } => {
                let mut outs = Vec::with_capacity(branches.len());
                for (b, branch) in branches.iter().enumerate() {
                    if branch.is_empty() {
                        outs.push(current);
                    } else {
                        let sub = run_layers(
                            branch,
                            current,
                            &format!("{name}.b{b}."),
                            params,
                            next_param,
                            param_nodes,
                            graph,
                            taps,
                        )?;
                        outs.push(sub.output);
                    }
                }
                graph.concat(&outs, 1)?
            }
            LayerSpec::DenseBlock { layers: k, .. } => {
                let mut acc = current;
                for _ in 0..*k {
                    let weight = take_param(graph, params, next_param, param_nodes);
                    let bias = take_param(graph, params, next_param, param_nodes);
                    let conv = graph.conv2d(acc, weight, Some(bias), 1, 1)?;
                    let act = graph.relu(conv);
                    acc = graph.concat(&[acc, act], 1)?;
                }
                acc
            }
        };
        let conv_bearing = matches!(
            layer,
            LayerSpec::InputNormConv { .. }
                | LayerSpec::Conv2d { .. }
                | LayerSpec::DenseBlock { .. }
                | LayerSpec::Concat { .. }
        );
        if conv_bearing && graph.shape(current).len() == 4 {
            taps.push((name.clone(), current));
        }
        if !matches!(layer, LayerSpec::Softmax) {
            logits = current;
        }
    }
    Ok(LayerOut {
        logits,
        output: current,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> Vec<LayerSpec> {
        vec![
            LayerSpec::InputNormConv { out_channels: 4 },
            LayerSpec::Conv2d {
                out_channels: 6,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::DenseBlock { layers: 2, growth: 4 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ]
    }

    #[test]
    fn builds_and_runs_with_consistent_shapes() {
        let model = ModelGraph::build(tiny_net(), InputShape::spatial(3, 8, 8), 1).unwrap();
        // inputnorm + conv + 2 dense-block inner convs + dense
        assert_eq!(model.parameterized_layers(), 5);
        let batch = Tensor::zeros(vec![2, 3, 8, 8]);
        let trace = model.forward_trace(&batch).unwrap();
        assert_eq!(trace.graph.shape(trace.output), &[2, 2]);
        for row in trace.graph.value(trace.output).chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // dense block output channels = 6 + 2*4 = 14
        let (_, last_tap) = trace.spatial_taps.last().unwrap();
        assert_eq!(trace.graph.shape(*last_tap)[1], 14);
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let a = ModelGraph::build(tiny_net(), InputShape::spatial(3, 8, 8), 7).unwrap();
        let b = ModelGraph::build(tiny_net(), InputShape::spatial(3, 8, 8), 7).unwrap();
        let c = ModelGraph::build(tiny_net(), InputShape::spatial(3, 8, 8), 8).unwrap();
        assert_eq!(a.params_bytes(), b.params_bytes());
        assert_ne!(a.params_bytes(), c.params_bytes());
    }

    #[test]
    fn freeze_fraction_marks_ceil_of_prefix() {
        // 8 parameterized layers at 0.25 -> first 2 frozen.
        let layers = vec![
            LayerSpec::InputNormConv { out_channels: 2 },
            LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::DenseBlock { layers: 3, growth: 2 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ];
        let mut model = ModelGraph::build(layers, InputShape::spatial(1, 8, 8), 0).unwrap();
        assert_eq!(model.parameterized_layers(), 8);
        model.freeze(0.25);
        let frozen: Vec<bool> = model.params().iter().map(|p| !p.trainable).collect();
        // Layers 0 and 1 (two params each) frozen, the rest trainable.
        assert_eq!(frozen[..4], [true; 4]);
        assert!(frozen[4..].iter().all(|&f| !f));
        // Boundary cases.
        model.freeze(0.0);
        assert!(model.params().iter().all(|p| p.trainable));
        model.freeze(1.0);
        assert!(model.params().iter().all(|p| !p.trainable));
        // Idempotent.
        model.freeze(0.25);
        let a: Vec<bool> = model.params().iter().map(|p| p.trainable).collect();
        model.freeze(0.25);
        let b: Vec<bool> = model.params().iter().map(|p| p.trainable).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn swap_head_changes_only_the_last_dense() {
        let model = ModelGraph::build(tiny_net(), InputShape::spatial(3, 8, 8), 3).unwrap();
        let swapped = model.swap_head(4, 99).unwrap();
        assert_eq!(swapped.output_width(), 4);
        for (old, new) in model.params().iter().zip(swapped.params()) {
            if old.name.starts_with("l6") {
                assert_ne!(old.value.shape(), new.value.shape());
            } else {
                assert_eq!(old.value.data(), new.value.data(), "{}", old.name);
            }
        }
    }

    #[test]
    fn concat_branches_support_skip_connections() {
        let layers = vec![
            LayerSpec::InputNormConv { out_channels: 4 },
            LayerSpec::Concat {
                branches: vec![
                    vec![],
                    vec![
                        LayerSpec::Conv2d { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
                        LayerSpec::Relu,
                    ],
                ],
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ];
        let model = ModelGraph::build(layers, InputShape::spatial(1, 8, 8), 0).unwrap();
        let batch = Tensor::filled(vec![1, 1, 8, 8], 0.5);
        let trace = model.forward_trace(&batch).unwrap();
        // 4 skip channels + 3 conv channels before pooling.
        let gap_input = trace
            .spatial_taps
            .iter()
            .find(|(n, _)| n == "l1")
            .map(|(_, id)| trace.graph.shape(*id)[1])
            .unwrap();
        assert_eq!(gap_input, 7);
    }

    #[test]
    fn rejects_input_shape_mismatch() {
        let model = ModelGraph::build(tiny_net(), InputShape::spatial(3, 8, 8), 1).unwrap();
        let bad = Tensor::zeros(vec![2, 1, 8, 8]);
        assert!(model.forward_trace(&bad).is_err());
    }
}
