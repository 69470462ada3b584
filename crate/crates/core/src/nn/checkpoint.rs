//! Model checkpoints: FCT1 parameter container plus a JSON sidecar carrying
//! the layer specs, freeze state, and optionally the train config/history.

use super::{InputShape, LayerSpec, ModelGraph, TrainConfig, TrainHistory};
use crate::tensor::{read_container, write_container, ContainerError, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub layers: Vec<LayerSpec>,
    pub input_shape: InputShape,
    pub freeze_fraction: f64,
    /// Trainability per parameter, in container order.
    pub trainable: Vec<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Container(ContainerError),
    Sidecar(String),
    Mismatch(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::Container(e) => write!(f, "checkpoint container: {e}"),
            CheckpointError::Sidecar(m) => write!(f, "checkpoint sidecar: {m}"),
            CheckpointError::Mismatch(m) => write!(f, "checkpoint mismatch: {m}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<ContainerError> for CheckpointError {
    fn from(e: ContainerError) -> Self {
        CheckpointError::Container(e)
    }
}

/// Writes `<base>.fct` and `<base>.json`.
pub fn save_model(
    base: &Path,
    model: &ModelGraph,
    config: Option<&TrainConfig>,
    history: Option<&TrainHistory>,
) -> Result<(), CheckpointError> {
    if let Some(dir) = base.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let named: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.detach()))
        .collect();
    let mut file = std::io::BufWriter::new(std::fs::File::create(with_ext(base, "fct"))?);
    write_container(&mut file, &named)?;

    let sidecar = ModelSidecar {
        layers: model.layers.clone(),
        input_shape: model.input_shape,
        freeze_fraction: model.freeze_fraction,
        trainable: model.params().iter().map(|p| p.trainable).collect(),
        config: config.cloned(),
        history: history.cloned(),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| CheckpointError::Sidecar(e.to_string()))?;
    std::fs::write(with_ext(base, "json"), json)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_model`].
pub fn load_model(base: &Path) -> Result<(ModelGraph, ModelSidecar), CheckpointError> {
    let json = std::fs::read_to_string(with_ext(base, "json"))?;
    let sidecar: ModelSidecar =
        serde_json::from_str(&json).map_err(|e| CheckpointError::Sidecar(e.to_string()))?;
    let mut file = std::io::BufReader::new(std::fs::File::open(with_ext(base, "fct"))?);
    let tensors = read_container(&mut file)?;

    let mut model = ModelGraph::build(sidecar.layers.clone(), sidecar.input_shape, 0)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    if tensors.len() != model.params().len() || sidecar.trainable.len() != tensors.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} tensors / {} trainable flags for {} parameters",
            tensors.len(),
            sidecar.trainable.len(),
            model.params().len()
        )));
    }
    for ((param, (name, value)), &trainable) in model
        .params_mut()
        .iter_mut()
        .zip(tensors)
        .zip(&sidecar.trainable)
    {
        if param.name != name || param.value.shape() != value.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "parameter {} does not match container record {name}",
                param.name
            )));
        }
        param.value = value;
        param.trainable = trainable;
    }
    model.freeze_fraction = sidecar.freeze_fraction;
    Ok((model, sidecar))
}

fn with_ext(base: &Path, ext: &str) -> std::path::PathBuf {
    let mut p = base.to_path_buf();
    let new_ext = match p.extension() {
        Some(e) => format!("{}.{ext}", e.to_string_lossy()),
        None => ext.to_string(),
    };
    p.set_extension(new_ext);
    p
}
