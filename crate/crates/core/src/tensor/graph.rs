use super::{Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// What a node computes, without its recorded state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    StopGradient,
    Add,
    BiasAdd,
    Mul,
    MatMul,
    Conv2d,
    Relu,
    Softmax,
    Concat,
    MaxPool2,
    GlobalAvgPool,
    Reshape,
    Log,
    Sum,
    Scale,
    WeightedCrossEntropy,
}

enum Payload {
    Leaf,
    StopGradient,
    Add,
    BiasAdd,
    Mul,
    MatMul {
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        stride: usize,
        padding: usize,
        batch: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        hout: usize,
        wout: usize,
    },
    Relu,
    Softmax,
    Concat {
        axis: usize,
    },
    MaxPool2 {
        /// Flat input index of the selected maximum, per output element.
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        h: usize,
        w: usize,
    },
    Reshape,
    Log,
    Sum,
    Scale {
        factor: f64,
    },
    WeightedCrossEntropy {
        labels: Vec<usize>,
        weights: Vec<f64>,
        /// Softmax of the logits, cached at forward time.
        probs: Vec<f64>,
    },
}

impl Payload {
    fn kind(&self) -> OpKind {
        match self {
            Payload::Leaf => OpKind::Leaf,
            Payload::StopGradient => OpKind::StopGradient,
            Payload::Add => OpKind::Add,
            Payload::BiasAdd => OpKind::BiasAdd,
            Payload::Mul => OpKind::Mul,
            Payload::MatMul { .. } => OpKind::MatMul,
            Payload::Conv2d { .. } => OpKind::Conv2d,
            Payload::Relu => OpKind::Relu,
            Payload::Softmax => OpKind::Softmax,
            Payload::Concat { .. } => OpKind::Concat,
            Payload::MaxPool2 { .. } => OpKind::MaxPool2,
            Payload::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Payload::Reshape => OpKind::Reshape,
            Payload::Log => OpKind::Log,
            Payload::Sum => OpKind::Sum,
            Payload::Scale { .. } => OpKind::Scale,
            Payload::WeightedCrossEntropy { .. } => OpKind::WeightedCrossEntropy,
        }
    }
}

struct Node {
    payload: Payload,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Eager computation tape. Ops evaluate immediately; `backward` runs one
/// reverse sweep from a chosen root. Inputs always precede outputs on the
/// tape, so reverse insertion order is a valid reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(
        &mut self,
        payload: Payload,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> NodeId {
        let requires_grad = match payload {
            Payload::Leaf | Payload::StopGradient => false,
            _ => inputs.iter().any(|&i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            payload,
            inputs,
            shape,
            data,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a copy of `t` as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let id = self.push(
            Payload::Leaf,
            vec![],
            t.shape().to_vec(),
            t.data().to_vec(),
        );
        self.nodes[id.0].requires_grad = t.requires_grad;
        id
    }

    /// Inserts a constant leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Payload::Leaf, vec![], shape, data)
    }

    /// Identical values, but backward never propagates past this node.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0].data.clone();
        self.push(Payload::StopGradient, vec![x], shape, data)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].payload.kind()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Forward result of a node as an owned tensor.
    pub fn forward(&self, root: NodeId) -> Tensor {
        let node = &self.nodes[root.0];
        let mut t = Tensor::new(node.shape.clone(), node.data.clone()).expect("node shape is valid");
        t.requires_grad = node.requires_grad;
        t
    }

    /// Gradient accumulated on a node by previous `backward` calls, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ---- ops ------------------------------------------------------------

    /// Elementwise sum of two equal-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Payload::Add, vec![a, b], shape, data))
    }

    /// `x + bias`, with `bias` broadcast over the last axis. The only
    /// broadcasting the engine supports.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        let bs = self.nodes[bias.0].shape.clone();
        let f = *xs.last().expect("tensor rank >= 1");
        if bs.len() != 1 || bs[0] != f {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                lhs: xs,
                rhs: bs,
            });
        }
        let bias_data = self.nodes[bias.0].data.clone();
        let data = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias_data[i % f])
            .collect();
        Ok(self.push(Payload::BiasAdd, vec![x, bias], xs, data))
    }

    /// Elementwise product of two equal-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Payload::Mul, vec![a, b], shape, data))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash.clone(),
                rhs: bsh.clone(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = self.nodes[a.0].data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &self.nodes[b.0].data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Ok(self.push(Payload::MatMul { m, k, n }, vec![a, b], vec![m, n], out))
    }

    /// 2-D convolution over `[batch, cin, h, w]` with weights
    /// `[cout, cin, kh, kw]`, optional per-channel bias `[cout]`, symmetric
    /// zero padding, and a single stride for both axes.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[weight.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = bias {
            let bs = &self.nodes[b.0].shape;
            if bs.len() != 1 || bs[0] != cout {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: bs.clone(),
                });
            }
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: self.nodes[x.0].shape.clone(),
                reason: format!("kernel {kh}x{kw} stride {stride} padding {padding} does not fit"),
            });
        }
        let hout = (h + 2 * padding - kh) / stride + 1;
        let wout = (w + 2 * padding - kw) / stride + 1;

        let dims = ConvDims {
            stride,
            padding,
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            hout,
            wout,
        };
        let mut out = vec![0.0; batch * cout * hout * wout];
        conv_forward(
            &self.nodes[x.0].data,
            &self.nodes[weight.0].data,
            &dims,
            &mut out,
        );
        if let Some(b) = bias {
            let bd = &self.nodes[b.0].data;
            for n in 0..batch {
                for co in 0..cout {
                    let base_o = (n * cout + co) * hout * wout;
                    for v in &mut out[base_o..base_o + hout * wout] {
                        *v += bd[co];
                    }
                }
            }
        }
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push(
            Payload::Conv2d {
                stride,
                padding,
                batch,
                cin,
                h,
                w,
                cout,
                kh,
                kw,
                hout,
                wout,
            },
            inputs,
            vec![batch, cout, hout, wout],
            out,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        self.push(Payload::Relu, vec![x], shape, data)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let k = *shape.last().expect("tensor rank >= 1");
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(Payload::Softmax, vec![x], shape, data)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        let first = self.nodes[parts
            .first()
            .copied()
            .expect("concat needs at least one input")
            .0]
            .shape
            .clone();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let len = self.nodes[p.0].shape[axis];
            let src = &self.nodes[p.0].data;
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * len * inner;
                data[dst_start..dst_start + len * inner]
                    .copy_from_slice(&src[src_start..src_start + len * inner]);
            }
            offset += len;
        }
        Ok(self.push(Payload::Concat { axis }, parts.to_vec(), shape, data))
    }

    /// 2x2 max pooling with stride 2 on `[batch, c, h, w]`; trailing odd
    /// rows/columns are dropped. Ties resolve to the first element in
    /// row-major scan order.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(TensorError::InvalidShape {
                op: "max_pool2",
                shape: xs,
                reason: "needs [batch, c, h>=2, w>=2]".into(),
            });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (hout, wout) = (h / 2, w / 2);
        let mut out = vec![0.0; batch * c * hout * wout];
        let mut argmax = vec![0usize; out.len()];
        let xd = &self.nodes[x.0].data;
        for nc in 0..batch * c {
            let base_in = nc * h * w;
            let base_out = nc * hout * wout;
            for oh in 0..hout {
                for ow in 0..wout {
                    let mut best_idx = base_in + (2 * oh) * w + 2 * ow;
                    let mut best = xd[best_idx];
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base_in + (2 * oh + dr) * w + 2 * ow + dc;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    out[base_out + oh * wout + ow] = best;
                    argmax[base_out + oh * wout + ow] = best_idx;
                }
            }
        }
        Ok(self.push(
            Payload::MaxPool2 { argmax },
            vec![x],
            vec![batch, c, hout, wout],
            out,
        ))
    }

    /// Spatial mean per channel: `[batch, c, h, w] -> [batch, c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "global_avg_pool",
                shape: xs,
                reason: "needs [batch, c, h, w]".into(),
            });
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = (h * w) as f64;
        let xd = &self.nodes[x.0].data;
        let data = (0..batch * c)
            .map(|nc| xd[nc * h * w..(nc + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        Ok(self.push(
            Payload::GlobalAvgPool { h, w },
            vec![x],
            vec![batch, c],
            data,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: new_shape,
                reason: format!("element count differs from {:?}", self.nodes[x.0].shape),
            });
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(Payload::Reshape, vec![x], new_shape, data))
    }

    /// Natural log, elementwise. Callers are responsible for keeping inputs
    /// strictly positive (the losses clamp before calling).
    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        self.push(Payload::Log, vec![x], shape, data)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.nodes[x.0].data.iter().sum();
        self.push(Payload::Sum, vec![x], vec![1], vec![total])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0].data.iter().map(|v| v * factor).collect();
        self.push(Payload::Scale { factor }, vec![x], shape, data)
    }

    /// Per-sample class-weighted cross-entropy on logits `[n, k]`:
    /// `w[y] * (logsumexp(z) - z[y])`, the log-sum-exp stabilized form of
    /// `-w[y] * log(softmax(z)[y])`. Output shape `[n]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<NodeId, TensorError> {
        let ls = self.nodes[logits.0].shape.clone();
        if ls.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "weighted_cross_entropy",
                shape: ls,
                reason: "logits must be [n, k]".into(),
            });
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n || weights.len() != k || labels.iter().any(|&y| y >= k) {
            return Err(TensorError::InvalidShape {
                op: "weighted_cross_entropy",
                shape: ls,
                reason: format!("{} labels / {} weights for k={k}", labels.len(), weights.len()),
            });
        }
        let zd = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; n * k];
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &zd[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let e = (z - m).exp();
                probs[i * k + j] = e;
                total += e;
            }
            for j in 0..k {
                probs[i * k + j] /= total;
            }
            let lse = m + total.ln();
            out[i] = weights[labels[i]] * (lse - row[labels[i]]);
        }
        Ok(self.push(
            Payload::WeightedCrossEntropy {
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            vec![logits],
            vec![n],
            out,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from `root`, contracting with `seed` (which must match
    /// the root's shape). Gradients accumulate into every `requires_grad`
    /// ancestor; nodes with `requires_grad == false` never allocate one.
    pub fn backward(&mut self, root: NodeId, seed: &Tensor) -> Result<(), TensorError> {
        if seed.shape() != self.nodes[root.0].shape {
            return Err(TensorError::SeedShapeMismatch {
                expected: self.nodes[root.0].shape.clone(),
                got: seed.shape().to_vec(),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }

        // Mark ancestors of the root that need a gradient.
        let mut live = vec![false; self.nodes.len()];
        live[root.0] = true;
        for i in (0..=root.0).rev() {
            if !live[i] || !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].payload, Payload::StopGradient) {
                continue;
            }
            for &inp in &self.nodes[i].inputs {
                if self.nodes[inp.0].requires_grad {
                    live[inp.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.data().to_vec());

        for i in (0..=root.0).rev() {
            if !live[i] {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Adds `g`-weighted input gradients of node `i` into `grads`.
    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |id: NodeId, update: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot =
                grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].data.len()]);
            update(slot);
        };
        match &node.payload {
            Payload::Leaf | Payload::StopGradient => {}
            Payload::Add => {
                for &inp in &node.inputs {
                    send(inp, &mut |slot| {
                        for (s, v) in slot.iter_mut().zip(g) {
                            *s += v;
                        }
                    });
                }
            }
            Payload::BiasAdd => {
                let f = self.nodes[node.inputs[1].0].data.len();
                send(node.inputs[0], &mut |slot| {
                    for (s, v) in slot.iter_mut().zip(g) {
                        *s += v;
                    }
                });
                send(node.inputs[1], &mut |slot| {
                    for (idx, v) in g.iter().enumerate() {
                        slot[idx % f] += v;
                    }
                });
            }
            Payload::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let bd = &self.nodes[b.0].data;
                send(a, &mut |slot| {
                    for ((s, v), y) in slot.iter_mut().zip(g).zip(bd) {
                        *s += v * y;
                    }
                });
                let ad = &self.nodes[a.0].data;
                send(b, &mut |slot| {
                    for ((s, v), x) in slot.iter_mut().zip(g).zip(ad) {
                        *s += v * x;
                    }
                });
            }
            Payload::MatMul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let bd = &self.nodes[b.0].data;
                // dA = G * B^T
                send(a, &mut |slot| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                slot[i * k + p] += gv * bd[p * n + j];
                            }
                        }
                    }
                });
                let ad = &self.nodes[a.0].data;
                // dB = A^T * G
                send(b, &mut |slot| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                slot[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Payload::Conv2d {
                stride,
                padding,
                batch,
                cin,
                h,
                w,
                cout,
                kh,
                kw,
                hout,
                wout,
            } => {
                let dims = ConvDims {
                    stride: *stride,
                    padding: *padding,
                    batch: *batch,
                    cin: *cin,
                    h: *h,
                    w: *w,
                    cout: *cout,
                    kh: *kh,
                    kw: *kw,
                    hout: *hout,
                    wout: *wout,
                };
                let x = node.inputs[0];
                let weight = node.inputs[1];
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[weight.0].data;

                send(x, &mut |slot| conv_backward_input(g, wd, &dims, slot));
                send(weight, &mut |slot| conv_backward_weight(g, xd, &dims, slot));
                if let Some(&b) = node.inputs.get(2) {
                    send(b, &mut |slot| {
                        for n in 0..dims.batch {
                            for co in 0..dims.cout {
                                let base_o = (n * dims.cout + co) * dims.hout * dims.wout;
                                slot[co] +=
                                    g[base_o..base_o + dims.hout * dims.wout].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Payload::Relu => {
                let xd = &self.nodes[node.inputs[0].0].data;
                send(node.inputs[0], &mut |slot| {
                    for ((s, v), x) in slot.iter_mut().zip(g).zip(xd) {
                        if *x > 0.0 {
                            *s += v;
                        }
                    }
                });
            }
            Payload::Softmax => {
                let k = *node.shape.last().expect("rank >= 1");
                let s = &node.data;
                send(node.inputs[0], &mut |slot| {
                    for row in 0..s.len() / k {
                        let sr = &s[row * k..(row + 1) * k];
                        let gr = &g[row * k..(row + 1) * k];
                        let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            slot[row * k + j] += sr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Payload::Concat { axis } => {
                let axis = *axis;
                let out_shape = &node.shape;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0;
                for &inp in &node.inputs {
                    let len = self.nodes[inp.0].shape[axis];
                    let start = offset;
                    send(inp, &mut |slot| {
                        for o in 0..outer {
                            let src_start = (o * axis_total + start) * inner;
                            let dst_start = o * len * inner;
                            for t in 0..len * inner {
                                slot[dst_start + t] += g[src_start + t];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Payload::MaxPool2 { argmax } => {
                send(node.inputs[0], &mut |slot| {
                    for (out_idx, &src) in argmax.iter().enumerate() {
                        slot[src] += g[out_idx];
                    }
                });
            }
            Payload::GlobalAvgPool { h, w } => {
                let hw = (h * w) as f64;
                let per_channel = h * w;
                send(node.inputs[0], &mut |slot| {
                    for (nc, gv) in g.iter().enumerate() {
                        let share = gv / hw;
                        for s in &mut slot[nc * per_channel..(nc + 1) * per_channel] {
                            *s += share;
                        }
                    }
                });
            }
            Payload::Reshape => {
                send(node.inputs[0], &mut |slot| {
                    for (s, v) in slot.iter_mut().zip(g) {
                        *s += v;
                    }
                });
            }
            Payload::Log => {
                let xd = &self.nodes[node.inputs[0].0].data;
                send(node.inputs[0], &mut |slot| {
                    for ((s, v), x) in slot.iter_mut().zip(g).zip(xd) {
                        *s += v / x;
                    }
                });
            }
            Payload::Sum => {
                let gv = g[0];
                send(node.inputs[0], &mut |slot| {
                    for s in slot.iter_mut() {
                        *s += gv;
                    }
                });
            }
            Payload::Scale { factor } => {
                let factor = *factor;
                send(node.inputs[0], &mut |slot| {
                    for (s, v) in slot.iter_mut().zip(g) {
                        *s += v * factor;
                    }
                });
            }
            Payload::WeightedCrossEntropy {
                labels,
                weights,
                probs,
            } => {
                let k = weights.len();
                send(node.inputs[0], &mut |slot| {
                    for (i, &y) in labels.iter().enumerate() {
                        let wy = weights[y] * g[i];
                        if wy == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            let indicator = if j == y { 1.0 } else { 0.0 };
                            slot[i * k + j] += wy * (probs[i * k + j] - indicator);
                        }
                    }
                });
            }
        }
    }
}


struct ConvDims {
    stride: usize,
    padding: usize,
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    hout: usize,
    wout: usize,
}

impl ConvDims {
    /// Output-row range where input row `oh + r - padding` is valid, and the
    /// matching output-column range for kernel column `c`. Stride-1 only.
    fn valid_ranges(&self, r: usize, c: usize) -> Option<(usize, usize, usize, usize)> {
        let oh_lo = self.padding.saturating_sub(r);
        let oh_hi = self.hout.min((self.h + self.padding).saturating_sub(r));
        let ow_lo = self.padding.saturating_sub(c);
        let ow_hi = self.wout.min((self.w + self.padding).saturating_sub(c));
        if oh_lo >= oh_hi || ow_lo >= ow_hi {
            None
        } else {
            Some((oh_lo, oh_hi, ow_lo, ow_hi))
        }
    }
}

/// Direct convolution; the stride-1 path walks contiguous row slices so the
/// inner loops vectorize.
fn conv_forward(xd: &[f64], wd: &[f64], d: &ConvDims, out: &mut [f64]) {
    if d.stride != 1 {
        conv_forward_generic(xd, wd, d, out);
        return;
    }
    for n in 0..d.batch {
        for co in 0..d.cout {
            let out_plane =
                &mut out[(n * d.cout + co) * d.hout * d.wout..][..d.hout * d.wout];
            for ci in 0..d.cin {
                let x_plane = &xd[(n * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                let w_base = (co * d.cin + ci) * d.kh * d.kw;
                for r in 0..d.kh {
                    for c in 0..d.kw {
                        let wv = wd[w_base + r * d.kw + c];
                        if wv == 0.0 {
                            continue;
                        }
                        let Some((oh_lo, oh_hi, ow_lo, ow_hi)) = d.valid_ranges(r, c) else {
                            continue;
                        };
                        for oh in oh_lo..oh_hi {
                            let ih = oh + r - d.padding;
                            let iw_lo = ow_lo + c - d.padding;
                            let orow = &mut out_plane[oh * d.wout + ow_lo..oh * d.wout + ow_hi];
                            let xrow = &x_plane[ih * d.w + iw_lo..ih * d.w + iw_lo + ow_hi - ow_lo];
                            for (o, xv) in orow.iter_mut().zip(xrow) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward_generic(xd: &[f64], wd: &[f64], d: &ConvDims, out: &mut [f64]) {
    for n in 0..d.batch {
        for co in 0..d.cout {
            let base_o = (n * d.cout + co) * d.hout * d.wout;
            for oh in 0..d.hout {
                for ow in 0..d.wout {
                    let mut acc = 0.0;
                    for ci in 0..d.cin {
                        let base_x = (n * d.cin + ci) * d.h * d.w;
                        let base_w = (co * d.cin + ci) * d.kh * d.kw;
                        for r in 0..d.kh {
                            let ih = oh * d.stride + r;
                            if ih < d.padding || ih - d.padding >= d.h {
                                continue;
                            }
                            let ih = ih - d.padding;
                            for c in 0..d.kw {
                                let iw = ow * d.stride + c;
                                if iw < d.padding || iw - d.padding >= d.w {
                                    continue;
                                }
                                let iw = iw - d.padding;
                                acc += xd[base_x + ih * d.w + iw] * wd[base_w + r * d.kw + c];
                            }
                        }
                    }
                    out[base_o + oh * d.wout + ow] = acc;
                }
            }
        }
    }
}

fn conv_backward_input(g: &[f64], wd: &[f64], d: &ConvDims, dx: &mut [f64]) {
    if d.stride != 1 {
        conv_backward_input_generic(g, wd, d, dx);
        return;
    }
    for n in 0..d.batch {
        for co in 0..d.cout {
            let g_plane = &g[(n * d.cout + co) * d.hout * d.wout..][..d.hout * d.wout];
            for ci in 0..d.cin {
                let dx_plane = &mut dx[(n * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                let w_base = (co * d.cin + ci) * d.kh * d.kw;
                for r in 0..d.kh {
                    for c in 0..d.kw {
                        let wv = wd[w_base + r * d.kw + c];
                        if wv == 0.0 {
                            continue;
                        }
                        let Some((oh_lo, oh_hi, ow_lo, ow_hi)) = d.valid_ranges(r, c) else {
                            continue;
                        };
                        for oh in oh_lo..oh_hi {
                            let ih = oh + r - d.padding;
                            let iw_lo = ow_lo + c - d.padding;
                            let grow = &g_plane[oh * d.wout + ow_lo..oh * d.wout + ow_hi];
                            let dxrow =
                                &mut dx_plane[ih * d.w + iw_lo..ih * d.w + iw_lo + ow_hi - ow_lo];
                            for (dv, gv) in dxrow.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input_generic(g: &[f64], wd: &[f64], d: &ConvDims, dx: &mut [f64]) {
    for n in 0..d.batch {
        for co in 0..d.cout {
            let base_o = (n * d.cout + co) * d.hout * d.wout;
            for oh in 0..d.hout {
                for ow in 0..d.wout {
                    let gv = g[base_o + oh * d.wout + ow];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..d.cin {
                        let base_x = (n * d.cin + ci) * d.h * d.w;
                        let base_w = (co * d.cin + ci) * d.kh * d.kw;
                        for r in 0..d.kh {
                            let ih = oh * d.stride + r;
                            if ih < d.padding || ih - d.padding >= d.h {
                                continue;
                            }
                            let ih = ih - d.padding;
                            for c in 0..d.kw {
                                let iw = ow * d.stride + c;
                                if iw < d.padding || iw - d.padding >= d.w {
                                    continue;
                                }
                                let iw = iw - d.padding;
                                dx[base_x + ih * d.w + iw] += gv * wd[base_w + r * d.kw + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(g: &[f64], xd: &[f64], d: &ConvDims, dw: &mut [f64]) {
    if d.stride != 1 {
        conv_backward_weight_generic(g, xd, d, dw);
        return;
    }
    for n in 0..d.batch {
        for co in 0..d.cout {
            let g_plane = &g[(n * d.cout + co) * d.hout * d.wout..][..d.hout * d.wout];
            for ci in 0..d.cin {
                let x_plane = &xd[(n * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                let w_base = (co * d.cin + ci) * d.kh * d.kw;
                for r in 0..d.kh {
                    for c in 0..d.kw {
                        let Some((oh_lo, oh_hi, ow_lo, ow_hi)) = d.valid_ranges(r, c) else {
                            continue;
                        };
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh + r - d.padding;
                            let iw_lo = ow_lo + c - d.padding;
                            let grow = &g_plane[oh * d.wout + ow_lo..oh * d.wout + ow_hi];
                            let xrow =
                                &x_plane[ih * d.w + iw_lo..ih * d.w + iw_lo + ow_hi - ow_lo];
                            for (gv, xv) in grow.iter().zip(xrow) {
                                acc += gv * xv;
                            }
                        }
                        dw[w_base + r * d.kw + c] += acc;
                    }
                }
            }
        }
    }
}

fn conv_backward_weight_generic(g: &[f64], xd: &[f64], d: &ConvDims, dw: &mut [f64]) {
    for n in 0..d.batch {
        for co in 0..d.cout {
            let base_o = (n * d.cout + co) * d.hout * d.wout;
            for oh in 0..d.hout {
                for ow in 0..d.wout {
                    let gv = g[base_o + oh * d.wout + ow];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..d.cin {
                        let base_x = (n * d.cin + ci) * d.h * d.w;
                        let base_w = (co * d.cin + ci) * d.kh * d.kw;
                        for r in 0..d.kh {
                            let ih = oh * d.stride + r;
                            if ih < d.padding || ih - d.padding >= d.h {
                                continue;
                            }
                            let ih = ih - d.padding;
                            for c in 0..d.kw {
                                let iw = ow * d.stride + c;
                                if iw < d.padding || iw - d.padding >= d.w {
                                    continue;
                                }
                                let iw = iw - d.padding;
                                dw[base_w + r * d.kw + c] += gv * xd[base_x + ih * d.w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>, grad: bool) -> NodeId {
        let mut t = Tensor::new(shape, data).unwrap();
        t.requires_grad = grad;
        g.leaf(&t)
    }

    #[test]
    fn matmul_identity_passes_scalar_through() {
        let mut g = Graph::new();
        let eye = leaf(&mut g, vec![1, 1], vec![1.0], false);
        let x = leaf(&mut g, vec![1, 1], vec![5.0], false);
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), &[5.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![-1.0, 0.0, 2.0], false);
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![0.0, 0.0], false);
        let y = g.softmax(x);
        assert_eq!(g.value(y), &[0.5, 0.5]);
        let total: f64 = g.value(y).iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn square_gradient_is_two_x() {
        // y = x^2 at x = 3 with seed 1 -> dy/dx = 6; exercises the
        // accumulate-on-reuse rule since x feeds mul twice.
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![3.0], true);
        let y = g.mul(x, x).unwrap();
        g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.grad(x), Some(&[6.0][..]));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![4], vec![0.3, -0.2, 5.0, 1.0], true);
        let y = g.sum(x);
        g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.grad(x), Some(&[1.0, 1.0, 1.0, 1.0][..]));
    }

    #[test]
    fn stop_gradient_preserves_values_and_blocks_backward() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0], true);
        let w = leaf(&mut g, vec![2], vec![3.0, 4.0], true);
        let xs = g.stop_gradient(x);
        assert_eq!(g.value(xs), &[1.0, 2.0]);
        let y = g.mul(xs, w).unwrap();
        let loss = g.sum(y);
        g.backward(loss, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.grad(x), None);
        assert_eq!(g.grad(w), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn zero_seed_leaves_zero_grads() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.5, -0.5], true);
        let r = g.relu(x);
        let y = g.sum(r);
        g.backward(y, &Tensor::scalar(0.0)).unwrap();
        assert_eq!(g.grad(x), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn seed_shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0], true);
        let err = g.backward(x, &Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, TensorError::SeedShapeMismatch { .. }));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 3], vec![0.0; 6], false);
        let b = leaf(&mut g, vec![2, 2], vec![0.0; 4], false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = leaf(&mut g, vec![2, 2], vec![0.1, -0.7, 0.33, 2.0], false);
            let w = leaf(&mut g, vec![2, 2], vec![1.0, 0.5, -0.25, 0.125], false);
            let h = g.matmul(x, w).unwrap();
            let r = g.relu(h);
            let s = g.softmax(r);
            g.value(s).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical leaves must give bit-identical outputs");
    }

    #[test]
    fn weighted_cross_entropy_matches_direct_formula() {
        // w[y] * -(y log p + (1-y) log(1-p)) with p = softmax(z)[1].
        let mut g = Graph::new();
        let z = leaf(&mut g, vec![2, 2], vec![0.3, -0.4, -1.0, 2.0], false);
        let loss = g
            .weighted_cross_entropy(z, &[0, 1], &[0.2, 1.0])
            .unwrap();
        let p = |a: f64, b: f64| (b - a).exp() / (1.0 + (b - a).exp());
        let p0 = p(0.3, -0.4);
        let p1 = p(-1.0, 2.0);
        let expect0 = 0.2 * -(1.0 - p0).ln();
        let expect1 = 1.0 * -p1.ln();
        assert!((g.value(loss)[0] - expect0).abs() < 1e-12);
        assert!((g.value(loss)[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = leaf(
            &mut g,
            vec![1, 1, 2, 2],
            vec![1.0, 4.0, 2.0, 3.0],
            true,
        );
        let p = g.max_pool2(x).unwrap();
        assert_eq!(g.value(p), &[4.0]);
        let s = g.sum(p);
        g.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.grad(x), Some(&[0.0, 1.0, 0.0, 0.0][..]));
    }
}
