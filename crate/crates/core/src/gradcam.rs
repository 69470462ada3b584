//! Grad-CAM explanations: channel weights from the spatial mean of the
//! class-score gradient at a chosen conv activation, combined, rectified,
//! upsampled to input size, and max-normalized.

use crate::kdl::{KdlError, KdlModel};
use crate::nn::ModelGraph;
use crate::tensor::{write_container, ContainerError, Graph, NodeId, Tensor, TensorError};
use crate::texture::GrayImage;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

#[derive(Debug)]
pub enum GradCamError {
    /// The selected layer has no spatial extent (or does not exist).
    BadLayer(String),
    TargetOutOfRange { target: usize, classes: usize },
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    Tensor(TensorError),
    Kdl(Box<KdlError>),
    Io(std::io::Error),
}

impl fmt::Display for GradCamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradCamError::BadLayer(m) => write!(f, "grad-cam layer: {m}"),
            GradCamError::TargetOutOfRange { target, classes } => {
                write!(f, "target class {target} outside 0..{classes}")
            }
            GradCamError::DimensionMismatch { expected, got } => {
                write!(f, "overlay size {got:?} does not match image {expected:?}")
            }
            GradCamError::Tensor(e) => write!(f, "grad-cam: {e}"),
            GradCamError::Kdl(e) => write!(f, "grad-cam: {e}"),
            GradCamError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for GradCamError {}

impl From<TensorError> for GradCamError {
    fn from(e: TensorError) -> Self {
        GradCamError::Tensor(e)
    }
}

impl From<KdlError> for GradCamError {
    fn from(e: KdlError) -> Self {
        GradCamError::Kdl(Box::new(e))
    }
}

impl From<std::io::Error> for GradCamError {
    fn from(e: std::io::Error) -> Self {
        GradCamError::Io(e)
    }
}

/// Which conv activation to explain.
#[derive(Debug, Clone, Default)]
pub enum LayerSelect {
    /// Last spatial activation before pooling collapses it (standard pick).
    #[default]
    LastConv,
    Name(String),
}

/// Normalized class-activation map at the network's input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Drops replication padding recorded by the featurizer.
    pub fn crop(&self, pad_right: usize, pad_bottom: usize) -> Heatmap {
        let (w, h) = (self.width - pad_right, self.height - pad_bottom);
        let mut values = Vec::with_capacity(w * h);
        for y in 0..h {
            values.extend_from_slice(&self.values[y * self.width..y * self.width + w]);
        }
        Heatmap {
            width: w,
            height: h,
            values,
        }
    }

    /// Bilinear resize (used to map network-resolution maps onto the
    /// native image before overlaying).
    pub fn resize(&self, width: usize, height: usize) -> Heatmap {
        Heatmap {
            width,
            height,
            values: bilinear(&self.values, self.width, self.height, width, height),
        }
    }

    pub fn write_fct(&self, path: &Path) -> Result<(), ContainerError> {
        let tensor = Tensor::new(vec![self.height, self.width], self.values.clone())
            .expect("heatmap dimensions");
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(ContainerError::Io)?);
        write_container(&mut file, &[("heatmap".to_string(), tensor)])
    }
}

fn bilinear(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    let mut out = vec![0.0; dw * dh];
    let fx = if dw > 1 { (sw - 1) as f64 / (dw - 1) as f64 } else { 0.0 };
    let fy = if dh > 1 { (sh - 1) as f64 / (dh - 1) as f64 } else { 0.0 };
    for y in 0..dh {
        let sy = y as f64 * fy;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = sy - y0 as f64;
        for x in 0..dw {
            let sx = x as f64 * fx;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = sx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bottom = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Core Grad-CAM on an already-built graph: seeds the chosen class at the
/// logits, reads the gradient at `tap`, and renders the rectified weighted
/// activation at `(out_w, out_h)`. A tap outside the gradient flow (the
/// frozen cue path) yields the all-zero map.
pub fn gradcam_from_graph(
    graph: &mut Graph,
    logits: NodeId,
    tap: NodeId,
    target_class: usize,
    out_w: usize,
    out_h: usize,
) -> Result<Heatmap, GradCamError> {
    let logits_shape = graph.shape(logits).to_vec();
    let classes = logits_shape[1];
    if target_class >= classes {
        return Err(GradCamError::TargetOutOfRange {
            target: target_class,
            classes,
        });
    }
    let tap_shape = graph.shape(tap).to_vec();
    if tap_shape.len() != 4 {
        return Err(GradCamError::BadLayer(format!(
            "selected activation has shape {tap_shape:?}, need spatial [n, c, h, w]"
        )));
    }
    let mut seed = vec![0.0; logits_shape.iter().product()];
    seed[target_class] = 1.0;
    graph.backward(logits, &Tensor::new(logits_shape, seed).expect("seed shape"))?;

    let (c, h, w) = (tap_shape[1], tap_shape[2], tap_shape[3]);
    let activations = graph.value(tap).to_vec();
    let zeros;
    let grads = match graph.grad(tap) {
        Some(g) => g,
        None => {
            // Not an ancestor of the class score (e.g. behind stop_gradient).
            zeros = vec![0.0; activations.len()];
            &zeros
        }
    };
    // Channel weights: spatial mean of the gradient.
    let hw = (h * w) as f64;
    let mut map = vec![0.0f64; h * w];
    for ch in 0..c {
        let base = ch * h * w;
        let weight: f64 = grads[base..base + h * w].iter().sum::<f64>() / hw;
        for i in 0..h * w {
            map[i] += weight * activations[base + i];
        }
    }
    for v in &mut map {
        *v = v.max(0.0);
    }
    let mut up = bilinear(&map, w, h, out_w, out_h);
    let peak = up.iter().cloned().fold(0.0f64, f64::max);
    if peak > 0.0 {
        for v in &mut up {
            *v /= peak;
        }
    }
    Ok(Heatmap {
        width: out_w,
        height: out_h,
        values: up,
    })
}

fn pick_tap(
    taps: &[(String, NodeId)],
    layer: &LayerSelect,
) -> Result<NodeId, GradCamError> {
    match layer {
        LayerSelect::LastConv => taps
            .last()
            .map(|(_, id)| *id)
            .ok_or_else(|| GradCamError::BadLayer("model has no spatial activation".into())),
        LayerSelect::Name(name) => taps
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| {
                GradCamError::BadLayer(format!(
                    "no spatial activation named {name:?}; available: {:?}",
                    taps.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>()
                ))
            }),
    }
}

/// Grad-CAM for a plain model on one `[c, h, w]` input.
pub fn gradcam_model(
    model: &ModelGraph,
    input: &Tensor,
    target_class: usize,
    layer: &LayerSelect,
) -> Result<Heatmap, GradCamError> {
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let batch = Tensor::new(shape, input.data().to_vec()).expect("batch of one");
    let mut trace = model.forward_trace(&batch)?;
    let tap = pick_tap(&trace.spatial_taps, layer)?;
    let (h, w) = (batch.shape()[2], batch.shape()[3]);
    gradcam_from_graph(&mut trace.graph, trace.logits, tap, target_class, w, h)
}

/// Grad-CAM for the cue-guided student: the cue runs in-graph behind
/// stop_gradient, so the map reflects the student alone.
pub fn gradcam_kdl(
    model: &KdlModel,
    input: &Tensor,
    target_class: usize,
    layer: &LayerSelect,
) -> Result<Heatmap, GradCamError> {
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let batch = Tensor::new(shape, input.data().to_vec()).expect("batch of one");
    let mut trace = model.trace_batch(&batch, None)?;
    let tap = pick_tap(&trace.student_taps, layer)?;
    let (h, w) = (batch.shape()[2], batch.shape()[3]);
    gradcam_from_graph(&mut trace.graph, trace.logits, tap, target_class, w, h)
}

/// Fixed blue-to-red colormap: v=0 is pure blue, v=1 pure red.
fn colormap(v: f64) -> [f64; 3] {
    [255.0 * v, 0.0, 255.0 * (1.0 - v)]
}

/// Blends the heatmap over the grayscale image and writes a binary PPM
/// (P6). `alpha` 0 reproduces the image; 1 shows only the colormap.
pub fn overlay(
    path: &Path,
    img: &GrayImage,
    map: &Heatmap,
    alpha: f64,
) -> Result<(), GradCamError> {
    if (map.width, map.height) != (img.width(), img.height()) {
        return Err(GradCamError::DimensionMismatch {
            expected: (img.width(), img.height()),
            got: (map.width, map.height),
        });
    }
    let mut rgb = Vec::with_capacity(3 * map.values.len());
    for (i, &v) in map.values.iter().enumerate() {
        let gray = img.pixels()[i] as f64;
        let cm = colormap(v.clamp(0.0, 1.0));
        for ch in 0..3 {
            let blended = (1.0 - alpha) * gray + alpha * cm[ch];
            rgb.push(blended.round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P6\n{} {}\n255\n", img.width(), img.height())?;
    file.write_all(&rgb)?;
    Ok(())
}


#[cfg(test)]
mod kdl_tests {
    use super::*;
    use crate::experts::{build_consult, ExpertFamily, ExpertTopology};
    use crate::kdl::{build_kdl, student_layers, CueJoin, CueSource};
    use crate::nn::{InputShape, ModelGraph};

    #[test]
    fn cue_path_gradcam_is_identically_zero() {
        let experts = ExpertFamily::ALL[..2]
            .iter()
            .map(|&f| (f, ExpertTopology::for_family(f).build(1, 16, 3).unwrap()))
            .collect();
        let ensemble = build_consult(experts, (8, 4), 4).unwrap();
        let student = ModelGraph::build(
            student_layers(8, CueJoin::Features),
            InputShape::spatial(1, 16, 16),
            5,
        )
        .unwrap();
        let model = build_kdl(student, CueSource::Ensemble(ensemble), (8, 4), CueJoin::Features, 6)
            .unwrap();
        let input = Tensor::filled(vec![1, 1, 16, 16], 0.4);
        let mut trace = model.trace_batch(&input, None).unwrap();
        assert!(!trace.cue_taps.is_empty());

        // Student path: a real (nonzero) explanation exists.
        let student_tap = trace.student_taps.last().unwrap().1;
        let student_map =
            gradcam_from_graph(&mut trace.graph, trace.logits, student_tap, 1, 16, 16).unwrap();
        assert!(student_map.values.iter().any(|&v| v > 0.0));

        // Cue path: stop_gradient makes the explanation identically zero.
        let mut trace = model.trace_batch(&input, None).unwrap();
        let cue_tap = trace.cue_taps.last().unwrap().1;
        let cue_map =
            gradcam_from_graph(&mut trace.graph, trace.logits, cue_tap, 1, 16, 16).unwrap();
        assert!(cue_map.values.iter().all(|&v| v == 0.0));
    }
}
