//! Analytic gradients vs the central finite-difference oracle, op by op.
//!
//! Loss for each check is a fixed random linear functional of the op output,
//! so degenerate seeds (like the all-ones seed on a softmax, whose output
//! always sums to 1) cannot hide a wrong backward rule.

use fusecad::gradcheck::{finite_diff, max_rel_error};
use fusecad::tensor::{Graph, NodeId, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

/// Random tensor bounded away from zero, for kinked ops (relu) and log.
fn random_tensor_offset(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if v.abs() < lo.abs().min(0.1) {
                v + 0.2
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

/// Contracts `node` with fixed coefficients and returns the scalar node.
fn project(g: &mut Graph, node: NodeId, coeffs: &[f64]) -> NodeId {
    let shape = g.shape(node).to_vec();
    let c = g.constant(shape, coeffs.to_vec());
    let prod = g.mul(node, c).unwrap();
    g.sum(prod)
}

/// Checks one op: `build` maps leaf nodes to the op output node.
fn check_op(
    name: &str,
    leaves: &[Tensor],
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
    coeffs: &[f64],
) {
    // analytic
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &ids);
    let loss = project(&mut g, out, coeffs);
    g.backward(loss, &Tensor::scalar(1.0)).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    // oracle
    let f = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &ids);
        let loss = project(&mut g, out, coeffs);
        g.value(loss)[0]
    };
    let reference = finite_diff(&f, leaves, EPS);

    let worst = max_rel_error(&analytic, &reference);
    assert!(worst < TOL, "{name}: max relative error {worst:.3e} >= {TOL:.0e}");
}

fn coeffs_for(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn add_gradient() {
    let mut r = rng(10);
    let a = random_tensor(&mut r, vec![3, 4]);
    let b = random_tensor(&mut r, vec![3, 4]);
    let c = coeffs_for(&mut r, 12);
    check_op("add", &[a, b], &|g, ids| g.add(ids[0], ids[1]).unwrap(), &c);
}

#[test]
fn bias_add_gradient() {
    let mut r = rng(11);
    let x = random_tensor(&mut r, vec![4, 5]);
    let b = random_tensor(&mut r, vec![5]);
    let c = coeffs_for(&mut r, 20);
    check_op("bias_add", &[x, b], &|g, ids| g.bias_add(ids[0], ids[1]).unwrap(), &c);
}

#[test]
fn mul_gradient() {
    let mut r = rng(12);
    let a = random_tensor(&mut r, vec![2, 3]);
    let b = random_tensor(&mut r, vec![2, 3]);
    let c = coeffs_for(&mut r, 6);
    check_op("mul", &[a, b], &|g, ids| g.mul(ids[0], ids[1]).unwrap(), &c);
}

#[test]
fn matmul_gradient() {
    let mut r = rng(13);
    let a = random_tensor(&mut r, vec![3, 4]);
    let b = random_tensor(&mut r, vec![4, 2]);
    let c = coeffs_for(&mut r, 6);
    check_op("matmul", &[a, b], &|g, ids| g.matmul(ids[0], ids[1]).unwrap(), &c);
}

#[test]
fn conv2d_gradient_with_stride_and_padding() {
    let mut r = rng(14);
    for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let x = random_tensor(&mut r, vec![2, 2, 5, 6]);
        let w = random_tensor(&mut r, vec![3, 2, 3, 3]);
        let b = random_tensor(&mut r, vec![3]);
        let hout = (5 + 2 * padding - 3) / stride + 1;
        let wout = (6 + 2 * padding - 3) / stride + 1;
        let c = coeffs_for(&mut r, 2 * 3 * hout * wout);
        check_op(
            &format!("conv2d s{stride} p{padding}"),
            &[x, w, b],
            &move |g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), stride, padding).unwrap(),
            &c,
        );
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut r = rng(15);
    let x = random_tensor_offset(&mut r, vec![4, 4], -1.0, 1.0);
    let c = coeffs_for(&mut r, 16);
    check_op("relu", &[x], &|g, ids| g.relu(ids[0]), &c);
}

#[test]
fn softmax_gradient() {
    let mut r = rng(16);
    let x = random_tensor(&mut r, vec![3, 5]);
    let c = coeffs_for(&mut r, 15);
    check_op("softmax", &[x], &|g, ids| g.softmax(ids[0]), &c);
}

#[test]
fn concat_gradient_along_both_axes() {
    let mut r = rng(17);
    for axis in [0usize, 1] {
        let a = random_tensor(&mut r, vec![2, 3]);
        let b = random_tensor(&mut r, vec![2, 3]);
        let total = 12;
        let c = coeffs_for(&mut r, total);
        check_op(
            &format!("concat axis {axis}"),
            &[a, b],
            &move |g, ids| g.concat(ids, axis).unwrap(),
            &c,
        );
    }
}

#[test]
fn max_pool2_gradient() {
    let mut r = rng(18);
    // Spread values so no pooling window has a near-tie within eps.
    let mut x = random_tensor(&mut r, vec![1, 2, 4, 4]);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += (i as f64) * 1e-2;
    }
    let c = coeffs_for(&mut r, 8);
    check_op("max_pool2", &[x], &|g, ids| g.max_pool2(ids[0]).unwrap(), &c);
}

#[test]
fn global_avg_pool_gradient() {
    let mut r = rng(19);
    let x = random_tensor(&mut r, vec![2, 3, 3, 3]);
    let c = coeffs_for(&mut r, 6);
    check_op("global_avg_pool", &[x], &|g, ids| g.global_avg_pool(ids[0]).unwrap(), &c);
}

#[test]
fn reshape_gradient() {
    let mut r = rng(20);
    let x = random_tensor(&mut r, vec![2, 6]);
    let c = coeffs_for(&mut r, 12);
    check_op("reshape", &[x], &|g, ids| g.reshape(ids[0], vec![3, 4]).unwrap(), &c);
}

#[test]
fn log_gradient() {
    let mut r = rng(21);
    let x = random_tensor_offset(&mut r, vec![3, 3], 0.5, 2.0);
    let c = coeffs_for(&mut r, 9);
    check_op("log", &[x], &|g, ids| g.log(ids[0]), &c);
}

#[test]
fn sum_gradient() {
    let mut r = rng(22);
    let x = random_tensor(&mut r, vec![5]);
    check_op("sum", &[x], &|g, ids| g.sum(ids[0]), &[1.0]);
}

#[test]
fn scale_gradient() {
    let mut r = rng(23);
    let x = random_tensor(&mut r, vec![4]);
    let c = coeffs_for(&mut r, 4);
    check_op("scale", &[x], &|g, ids| g.scale(ids[0], -2.5), &c);
}

#[test]
fn weighted_cross_entropy_gradient() {
    let mut r = rng(24);
    let z = random_tensor(&mut r, vec![6, 2]);
    let labels = [0usize, 1, 1, 0, 1, 0];
    let weights = [0.2, 1.0];
    let c = coeffs_for(&mut r, 6);
    check_op(
        "weighted_cross_entropy",
        &[z],
        &move |g, ids| g.weighted_cross_entropy(ids[0], &labels, &weights).unwrap(),
        &c,
    );
}

#[test]
fn stop_gradient_blocks_and_passes_values() {
    let mut r = rng(25);
    let x = random_tensor(&mut r, vec![3]);
    let w = random_tensor(&mut r, vec![3]);
    let mut g = Graph::new();
    let xi = g.leaf(&x);
    let wi = g.leaf(&w);
    let xs = g.stop_gradient(xi);
    let prod = g.mul(xs, wi).unwrap();
    let loss = g.sum(prod);
    g.backward(loss, &Tensor::scalar(1.0)).unwrap();
    assert!(g.grad(xi).is_none(), "stop_gradient must block the cue path");
    let wg = g.grad(wi).unwrap();
    for (got, want) in wg.iter().zip(x.data()) {
        assert!((got - want).abs() < 1e-12);
    }
}

/// Three dense layers with relu between, projected to a scalar: every
/// parameter gradient must match central finite differences.
#[test]
fn three_layer_dense_net_matches_finite_differences() {
    let mut r = rng(26);
    let x = random_tensor(&mut r, vec![2, 4]);
    let w1 = random_tensor(&mut r, vec![4, 5]);
    let b1 = random_tensor(&mut r, vec![5]);
    let w2 = random_tensor(&mut r, vec![5, 3]);
    let b2 = random_tensor(&mut r, vec![3]);
    let w3 = random_tensor(&mut r, vec![3, 2]);
    let b3 = random_tensor(&mut r, vec![2]);
    let c = coeffs_for(&mut r, 4);
    let leaves = [x, w1, b1, w2, b2, w3, b3];
    check_op(
        "dense3",
        &leaves,
        &|g, ids| {
            let h1 = g.matmul(ids[0], ids[1]).unwrap();
            let h1 = g.bias_add(h1, ids[2]).unwrap();
            let h1 = g.relu(h1);
            let h2 = g.matmul(h1, ids[3]).unwrap();
            let h2 = g.bias_add(h2, ids[4]).unwrap();
            let h2 = g.relu(h2);
            let h3 = g.matmul(h2, ids[5]).unwrap();
            g.bias_add(h3, ids[6]).unwrap()
        },
        &c,
    );
}

/// Softmax output invariants: sums to one, lies strictly inside (0, 1).
#[test]
fn softmax_output_is_a_distribution() {
    let mut r = rng(27);
    for _ in 0..50 {
        let x = random_tensor(&mut r, vec![4, 6]);
        let mut g = Graph::new();
        let xi = g.leaf(&x);
        let s = g.softmax(xi);
        for row in g.value(s).chunks(6) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

/// End-to-end audit: 2 convs + a dense block + dense head on 1x8x8 input,
/// every trainable parameter vs finite differences through the weighted
/// cross-entropy loss.
#[test]
fn conv_dense_block_network_matches_finite_differences() {
    use fusecad::nn::{InputShape, LayerSpec, ModelGraph};

    let layers = vec![
        LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv2d { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::DenseBlock { layers: 2, growth: 2 },
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense { units: 2 },
        LayerSpec::Softmax,
    ];
    let model = ModelGraph::build(layers, InputShape::spatial(1, 8, 8), 77).unwrap();
    let mut r = rng(99);
    let batch = {
        let data = (0..2 * 64).map(|_| r.random_range(0.0..1.0)).collect();
        Tensor::new(vec![2, 1, 8, 8], data).unwrap()
    };
    let labels = [0usize, 1];
    let weights = [0.2, 1.0];

    // Analytic gradients through the full graph.
    let mut trace = model.forward_trace(&batch).unwrap();
    let per = trace
        .graph
        .weighted_cross_entropy(trace.logits, &labels, &weights)
        .unwrap();
    let total = trace.graph.sum(per);
    trace.graph.backward(total, &Tensor::scalar(1.0)).unwrap();
    let analytic: Vec<Vec<f64>> = trace
        .param_nodes
        .iter()
        .map(|&id| trace.graph.grad(id).unwrap().to_vec())
        .collect();

    // Finite-difference oracle re-runs the forward pass per element.
    let leaves: Vec<Tensor> = model.params().iter().map(|p| p.value.detach()).collect();
    let f = |vals: &[Tensor]| {
        let mut m = model.clone();
        for (p, v) in m.params_mut().iter_mut().zip(vals) {
            p.value = v.detach();
        }
        let mut trace = m.forward_trace(&batch).unwrap();
        let per = trace
            .graph
            .weighted_cross_entropy(trace.logits, &labels, &weights)
            .unwrap();
        let total = trace.graph.sum(per);
        trace.graph.value(total)[0]
    };
    let reference = finite_diff(&f, &leaves, EPS);
    let worst = max_rel_error(&analytic, &reference);
    assert!(worst < TOL, "max relative error {worst:.3e}");
}
