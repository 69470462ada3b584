//! High-level experiment drivers shared by the CLI and the acceptance
//! suite: dataset preparation per input mode, expert pretraining and
//! fine-tuning, consult assembly, cue-guided student runs, and the
//! cross-validation wiring between all of them.

use crate::dataio::{DataError, DatasetManifest, SplitPlan};
use crate::experts::{
    build_consult, finetune_expert, pretrain_expert, proxy_texture_set, select_for_consult,
    train_consult, ConsultEnsemble, ExpertError, ExpertFamily, ExpertTopology,
};
use crate::kdl::{build_kdl, student_layers, train_kdl, CueJoin, CueSource, KdlError, KdlModel};
use crate::metrics::{run_cv, run_cv_multi, EvalReport, MetricsError, RepOutcome};
use crate::nn::{DataSet, InputShape, ModelError, ModelGraph, TrainConfig, TrainError, TrainHistory};
use crate::seed::derive;
use crate::tensor::{Tensor, TensorError};
use crate::texture::{featurize, read_pgm, resample_area, TextureError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug)]
pub enum PipelineError {
    Data(DataError),
    Texture(TextureError),
    Expert(ExpertError),
    Kdl(KdlError),
    Model(ModelError),
    Train(TrainError),
    Metrics(MetricsError),
    Tensor(TensorError),
    Config(String),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Data(e) => write!(f, "{e}"),
            PipelineError::Texture(e) => write!(f, "{e}"),
            PipelineError::Expert(e) => write!(f, "{e}"),
            PipelineError::Kdl(e) => write!(f, "{e}"),
            PipelineError::Model(e) => write!(f, "{e}"),
            PipelineError::Train(e) => write!(f, "{e}"),
            PipelineError::Metrics(e) => write!(f, "{e}"),
            PipelineError::Tensor(e) => write!(f, "{e}"),
            PipelineError::Config(m) => write!(f, "config: {m}"),
        }
    }
}

impl std::error::Error for PipelineError {}

macro_rules! from_err {
    ($variant:ident, $ty:ty) => {
        impl From<$ty> for PipelineError {
            fn from(e: $ty) -> Self {
                PipelineError::$variant(e)
            }
        }
    };
}

from_err!(Data, DataError);
from_err!(Texture, TextureError);
from_err!(Expert, ExpertError);
from_err!(Kdl, KdlError);
from_err!(Model, ModelError);
from_err!(Train, TrainError);
from_err!(Metrics, MetricsError);
from_err!(Tensor, TensorError);

/// The three dataset framings: raw US only, the augmented collection
/// (raw, LBP, and DWT planes as separate single-channel samples), and the
/// channel-stacked fusion object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Raw,
    Augmented,
    Fused,
}

impl InputMode {
    pub const ALL: [InputMode; 3] = [InputMode::Raw, InputMode::Augmented, InputMode::Fused];

    pub fn channels(self) -> usize {
        match self {
            InputMode::Fused => 3,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputMode::Raw => "raw",
            InputMode::Augmented => "augmented",
            InputMode::Fused => "fused",
        }
    }
}

impl FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(InputMode::Raw),
            "augmented" => Ok(InputMode::Augmented),
            "fused" => Ok(InputMode::Fused),
            other => Err(format!("unknown input mode {other:?} (raw|augmented|fused)")),
        }
    }
}

/// A manifest turned into network-ready tensors. `groups[i]` lists the
/// dataset rows spawned by manifest sample `i` (three in augmented mode),
/// so manifest-level split indices expand to dataset indices.
pub struct PreparedData {
    pub data: DataSet,
    /// Patient id per dataset row.
    pub patients: Vec<String>,
    pub groups: Vec<Vec<usize>>,
    pub mode: InputMode,
    pub resolution: usize,
}

impl PreparedData {
    pub fn expand(&self, manifest_indices: &[usize]) -> Vec<usize> {
        manifest_indices
            .iter()
            .flat_map(|&i| self.groups[i].iter().copied())
            .collect()
    }
}

/// Loads every image of the manifest, featurizes it, resamples each channel
/// to `resolution`, and frames it per the input mode.
pub fn prepare_dataset(
    manifest: &DatasetManifest,
    mode: InputMode,
    resolution: usize,
) -> Result<PreparedData, PipelineError> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut patients = Vec::new();
    let mut groups = Vec::with_capacity(manifest.samples.len());
    for sample in &manifest.samples {
        let img = read_pgm(&sample.image_path)?;
        let fused = featurize(&img);
        let (w, h) = (fused.width(), fused.height());
        let down = |plane: &[f64]| resample_area(plane, w, h, resolution, resolution);
        let mut my_rows = Vec::new();
        match mode {
            InputMode::Raw => {
                let t = Tensor::new(vec![1, resolution, resolution], down(fused.channel(0)))
                    .expect("plane size");
                my_rows.push(inputs.len());
                inputs.push(t);
            }
            InputMode::Fused => {
                let mut data = Vec::with_capacity(3 * resolution * resolution);
                for c in 0..3 {
                    data.extend(down(fused.channel(c)));
                }
                let t = Tensor::new(vec![3, resolution, resolution], data).expect("plane size");
                my_rows.push(inputs.len());
                inputs.push(t);
            }
            InputMode::Augmented => {
                for c in 0..3 {
                    let t = Tensor::new(vec![1, resolution, resolution], down(fused.channel(c)))
                        .expect("plane size");
                    my_rows.push(inputs.len());
                    inputs.push(t);
                }
            }
        }
        for _ in 0..my_rows.len() {
            labels.push(sample.label as usize);
            patients.push(sample.patient_id.clone());
        }
        groups.push(my_rows);
    }
    Ok(PreparedData {
        data: DataSet::new(inputs, labels),
        patients,
        groups,
        mode,
        resolution,
    })
}

/// Fraction of the training portion carved out (stratified) as the
/// early-stopping validation set.
pub const VAL_CARVE: f64 = 0.1;

/// Pretrains one expert of each requested family on the procedural texture
/// proxy task. Returns (family, model with proxy head, proxy val accuracy).
pub fn pretrain_families(
    families: &[ExpertFamily],
    channels: usize,
    resolution: usize,
    proxy_images: usize,
    config: &TrainConfig,
) -> Result<Vec<(ExpertFamily, ModelGraph, f64)>, PipelineError> {
    let proxy = proxy_texture_set(proxy_images, channels, resolution, derive(config.seed, &[0x17]));
    let (train_part, val_part) = proxy.stratified_carve(0.2, derive(config.seed, &[0x18]));
    let classes = proxy.labels.iter().max().map_or(0, |&m| m + 1);
    let mut out = Vec::with_capacity(families.len());
    for (i, &family) in families.iter().enumerate() {
        let topology = ExpertTopology::for_family(family);
        let mut cfg = config.clone();
        // The proxy task is balanced; the binary class weights do not apply.
        cfg.class_weights = vec![1.0; classes];
        cfg.seed = derive(config.seed, &[0x19, i as u64]);
        let (model, history) = pretrain_expert(&topology, &train_part, &val_part, &cfg)?;
        let val_acc = history
            .epochs
            .iter()
            .map(|e| e.val_accuracy)
            .fold(0.0, f64::max);
        out.push((family, model, val_acc));
    }
    Ok(out)
}

/// Fine-tunes `pretrained` on the given manifest-level train indices, with
/// a stratified validation carve-out. Returns the model and its best
/// validation accuracy.
pub fn finetune_on(
    pretrained: &ModelGraph,
    freeze_fraction: f64,
    prepared: &PreparedData,
    train_manifest_indices: &[usize],
    config: &TrainConfig,
) -> Result<(ModelGraph, TrainHistory, f64), PipelineError> {
    let rows = prepared.expand(train_manifest_indices);
    let train_all = prepared.data.subset(&rows);
    let (train_part, val_part) = train_all.stratified_carve(VAL_CARVE, derive(config.seed, &[0x1a]));
    let (model, history) = finetune_expert(pretrained, freeze_fraction, &train_part, &val_part, config)?;
    let val_acc = history
        .epochs
        .iter()
        .map(|e| e.val_accuracy)
        .fold(0.0, f64::max);
    Ok((model, history, val_acc))
}

/// Malignant-class probability per row of `rows`.
fn score_rows<P>(predict: P, data: &DataSet, rows: &[usize]) -> Result<Vec<f64>, PipelineError>
where
    P: Fn(&Tensor) -> Result<Vec<Vec<f64>>, PipelineError>,
{
    let mut scores = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(64) {
        let batch = data.stack(chunk);
        scores.extend(predict(&batch)?.into_iter().map(|p| p[1]));
    }
    Ok(scores)
}

/// Cross-validated single-expert run: per repetition, fine-tune a fresh
/// copy of the pretrained expert and score the held-out patients.
pub fn run_expert_cv(
    name: &str,
    pretrained: &ModelGraph,
    freeze_fraction: f64,
    prepared: &PreparedData,
    plan: &SplitPlan,
    config: &TrainConfig,
) -> Result<EvalReport, PipelineError> {
    let report = run_cv(name, plan, Some(&prepared.patients_by_manifest()), |_rep, train, test, rep_seed| {
        let mut cfg = config.clone();
        cfg.seed = rep_seed;
        let (model, _history, _) =
            finetune_on(pretrained, freeze_fraction, prepared, train, &cfg)
                .map_err(|e| e.to_string())?;
        let rows = prepared.expand(test);
        let scores = score_rows(
            |batch| Ok(model.forward_probs(batch).map_err(PipelineError::from)?),
            &prepared.data,
            &rows,
        )
        .map_err(|e| e.to_string())?;
        let labels = rows.iter().map(|&r| prepared.data.labels[r]).collect();
        Ok(RepOutcome {
            scores,
            labels,
            convergence_epoch: _history.convergence_epoch,
        })
    })?;
    Ok(report)
}

impl PreparedData {
    /// Patients re-indexed at manifest granularity, for the leakage check
    /// inside the cross-validation driver.
    fn patients_by_manifest(&self) -> Vec<String> {
        self.groups
            .iter()
            .map(|rows| self.patients[rows[0]].clone())
            .collect()
    }
}

/// A fine-tuned consult candidate.
pub struct Candidate {
    pub family: ExpertFamily,
    pub model: ModelGraph,
    pub val_accuracy: f64,
    pub history: TrainHistory,
}

/// Fine-tunes one instance of each pretrained family, then extra instances
/// of the best-scoring families (fresh seeds) until `count` candidates
/// exist, so consults larger than the family roster can repeat a family.
pub fn finetune_candidates(
    pretrained: &[(ExpertFamily, ModelGraph, f64)],
    count: usize,
    freeze_fraction: f64,
    prepared: &PreparedData,
    train_manifest_indices: &[usize],
    config: &TrainConfig,
) -> Result<Vec<Candidate>, PipelineError> {
    let mut candidates: Vec<Candidate> = Vec::new();
    for (i, (family, model, _)) in pretrained.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.seed = derive(config.seed, &[0x1b, i as u64]);
        let (tuned, history, val_accuracy) =
            finetune_on(model, freeze_fraction, prepared, train_manifest_indices, &cfg)?;
        candidates.push(Candidate {
            family: *family,
            model: tuned,
            val_accuracy,
            history,
        });
    }
    let mut extra = 0u64;
    while candidates.len() < count {
        let best = candidates
            .iter()
            .enumerate()
            .max_by(|a, b| {
                a.1.val_accuracy
                    .partial_cmp(&b.1.val_accuracy)
                    .expect("finite accuracy")
            })
            .map(|(i, _)| i)
            .expect("at least one candidate");
        let family = candidates[best].family;
        let source = pretrained
            .iter()
            .find(|(f, _, _)| *f == family)
            .expect("family was pretrained");
        let mut cfg = config.clone();
        cfg.seed = derive(config.seed, &[0x1c, extra]);
        let (tuned, history, val_accuracy) =
            finetune_on(&source.1, freeze_fraction, prepared, train_manifest_indices, &cfg)?;
        candidates.push(Candidate {
            family,
            model: tuned,
            val_accuracy,
            history,
        });
        extra += 1;
    }
    Ok(candidates)
}

/// Selects the top `n` candidates and trains a stacking head over them.
pub fn consult_from_candidates(
    candidates: &[Candidate],
    n: usize,
    head_sizes: (usize, usize),
    prepared: &PreparedData,
    train_manifest_indices: &[usize],
    config: &TrainConfig,
) -> Result<(ConsultEnsemble, Vec<(ExpertFamily, f64)>, TrainHistory), PipelineError> {
    let ranked: Vec<(ExpertFamily, f64)> = candidates
        .iter()
        .map(|c| (c.family, c.val_accuracy))
        .collect();
    let picked = select_for_consult(&ranked, n)?;
    let members: Vec<(ExpertFamily, ModelGraph)> = picked
        .iter()
        .map(|&i| (candidates[i].family, candidates[i].model.clone()))
        .collect();
    let selection: Vec<(ExpertFamily, f64)> = picked
        .iter()
        .map(|&i| (candidates[i].family, candidates[i].val_accuracy))
        .collect();

    let mut ensemble = build_consult(members, head_sizes, derive(config.seed, &[0x1d]))?;
    let rows = prepared.expand(train_manifest_indices);
    let train_all = prepared.data.subset(&rows);
    let (train_part, val_part) =
        train_all.stratified_carve(VAL_CARVE, derive(config.seed, &[0x1e]));
    let mut head_cfg = config.clone();
    head_cfg.seed = derive(config.seed, &[0x1f]);
    let history = train_consult(&mut ensemble, &train_part, &val_part, &head_cfg)?;
    Ok((ensemble, selection, history))
}

/// One repetition's worth of consult construction: fine-tune candidates,
/// select the top `n` by validation accuracy, and train the stacking head.
pub fn build_trained_consult(
    pretrained: &[(ExpertFamily, ModelGraph, f64)],
    n: usize,
    freeze_fraction: f64,
    head_sizes: (usize, usize),
    prepared: &PreparedData,
    train_manifest_indices: &[usize],
    config: &TrainConfig,
) -> Result<(ConsultEnsemble, Vec<(ExpertFamily, f64)>), PipelineError> {
    let candidates =
        finetune_candidates(pretrained, n, freeze_fraction, prepared, train_manifest_indices, config)?;
    let (ensemble, selection, _) =
        consult_from_candidates(&candidates, n, head_sizes, prepared, train_manifest_indices, config)?;
    Ok((ensemble, selection))
}

/// Builds and trains a cue-guided student (or the unaided baseline when
/// `cue` is a constant) on the given train indices; returns the model and
/// its history.
pub fn train_student(
    cue: CueSource,
    cue_join: CueJoin,
    feature_width: usize,
    head_sizes: (usize, usize),
    prepared: &PreparedData,
    train_manifest_indices: &[usize],
    config: &TrainConfig,
) -> Result<(KdlModel, TrainHistory), PipelineError> {
    let student = ModelGraph::build(
        student_layers(feature_width, cue_join),
        InputShape::spatial(prepared.mode.channels(), prepared.resolution, prepared.resolution),
        derive(config.seed, &[0x20]),
    )?;
    let mut model = build_kdl(student, cue, head_sizes, cue_join, derive(config.seed, &[0x21]))?;
    let rows = prepared.expand(train_manifest_indices);
    let train_all = prepared.data.subset(&rows);
    let (train_part, val_part) =
        train_all.stratified_carve(VAL_CARVE, derive(config.seed, &[0x22]));
    let history = train_kdl(&mut model, &train_part, &val_part, config)?;
    Ok((model, history))
}

/// Scores a trained student over manifest-level test indices.
pub fn score_student(
    model: &KdlModel,
    prepared: &PreparedData,
    test_manifest_indices: &[usize],
) -> Result<RepOutcome, PipelineError> {
    let rows = prepared.expand(test_manifest_indices);
    let scores = score_rows(
        |batch| Ok(model.predict(batch)?),
        &prepared.data,
        &rows,
    )?;
    let labels = rows.iter().map(|&r| prepared.data.labels[r]).collect();
    Ok(RepOutcome {
        scores,
        labels,
        convergence_epoch: 0,
    })
}


/// Where a repetition's consult comes from: rebuilt on that repetition's
/// training split, or one fixed externally fitted ensemble (the unbiased
/// evaluation uses a consult fitted on a disjoint-patient manifest).
pub enum ConsultSource<'a> {
    PerRepetition {
        pretrained: &'a [(ExpertFamily, ModelGraph, f64)],
        n: usize,
        freeze_fraction: f64,
        head_sizes: (usize, usize),
    },
    Fixed(&'a ConsultEnsemble),
}

/// Experts-consult sweep: per repetition the expert pool is fine-tuned
/// once and shared across all requested sizes. Returns one report for the
/// best single expert ("Baseline") followed by one per EC size, in order.
pub fn run_ec_cv(
    pretrained: &[(ExpertFamily, ModelGraph, f64)],
    sizes: &[usize],
    freeze_fraction: f64,
    head_sizes: (usize, usize),
    prepared: &PreparedData,
    plan: &SplitPlan,
    config: &TrainConfig,
) -> Result<Vec<EvalReport>, PipelineError> {
    let n_max = sizes.iter().copied().max().unwrap_or(2);
    let patients = prepared.patients_by_manifest();
    let reports = run_cv_multi(plan, Some(&patients), |_rep, train, test, rep_seed| {
        let mut cfg = config.clone();
        cfg.seed = rep_seed;
        let candidates =
            finetune_candidates(pretrained, n_max, freeze_fraction, prepared, train, &cfg)
                .map_err(|e| e.to_string())?;
        let rows = prepared.expand(test);
        let labels: Vec<usize> = rows.iter().map(|&r| prepared.data.labels[r]).collect();

        let best = candidates
            .iter()
            .max_by(|a, b| {
                a.val_accuracy
                    .partial_cmp(&b.val_accuracy)
                    .expect("finite accuracy")
            })
            .expect("at least one candidate");
        let baseline_scores = score_rows(
            |batch| Ok(best.model.forward_probs(batch).map_err(PipelineError::from)?),
            &prepared.data,
            &rows,
        )
        .map_err(|e| e.to_string())?;
        let mut outcomes = vec![(
            "Baseline".to_string(),
            RepOutcome {
                scores: baseline_scores,
                labels: labels.clone(),
                convergence_epoch: best.history.convergence_epoch,
            },
        )];

        for &n in sizes {
            let (ensemble, _selection, head_history) =
                consult_from_candidates(&candidates, n, head_sizes, prepared, train, &cfg)
                    .map_err(|e| e.to_string())?;
            let scores = score_rows(
                |batch| Ok(ensemble.predict(batch)?),
                &prepared.data,
                &rows,
            )
            .map_err(|e| e.to_string())?;
            outcomes.push((
                format!("EC-{n}"),
                RepOutcome {
                    scores,
                    labels: labels.clone(),
                    convergence_epoch: head_history.convergence_epoch,
                },
            ));
        }
        Ok(outcomes)
    })?;
    Ok(reports)
}

/// Cue-guided (or constant-cue) student sweep over the plan. Returns the
/// report plus each repetition's training history for convergence curves.
pub fn run_student_cv(
    name: &str,
    consult: Option<ConsultSource<'_>>,
    cue_join: CueJoin,
    feature_width: usize,
    head_sizes: (usize, usize),
    prepared: &PreparedData,
    plan: &SplitPlan,
    config: &TrainConfig,
) -> Result<(EvalReport, Vec<TrainHistory>), PipelineError> {
    use std::sync::Mutex;
    let histories: Mutex<Vec<Option<TrainHistory>>> =
        Mutex::new(vec![None; plan.repetitions.len()]);
    let patients = prepared.patients_by_manifest();
    let report = run_cv(name, plan, Some(&patients), |rep, train, test, rep_seed| {
        let mut cfg = config.clone();
        cfg.seed = rep_seed;
        let cue = match &consult {
            None => CueSource::Constant(vec![0.0, 0.0]),
            Some(ConsultSource::Fixed(ensemble)) => CueSource::Ensemble((*ensemble).clone()),
            Some(ConsultSource::PerRepetition {
                pretrained,
                n,
                freeze_fraction,
                head_sizes,
            }) => {
                let (ensemble, _) = build_trained_consult(
                    pretrained,
                    *n,
                    *freeze_fraction,
                    *head_sizes,
                    prepared,
                    train,
                    &cfg,
                )
                .map_err(|e| e.to_string())?;
                CueSource::Ensemble(ensemble)
            }
        };
        let (model, history) = train_student(
            cue,
            cue_join,
            feature_width,
            head_sizes,
            prepared,
            train,
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let mut outcome = score_student(&model, prepared, test).map_err(|e| e.to_string())?;
        outcome.convergence_epoch = history.convergence_epoch;
        histories.lock().expect("history lock")[rep] = Some(history);
        Ok(outcome)
    })?;
    let histories = histories
        .into_inner()
        .expect("history lock")
        .into_iter()
        .map(|h| h.expect("every repetition ran"))
        .collect();
    Ok((report, histories))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SynthSpec};

    #[test]
    fn prepare_dataset_per_mode_shapes_and_expansion() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            count: 8,
            patients: 4,
            malignant_fraction: 0.4,
            size: 32,
            seed: 1,
        };
        let (manifest, _) = generate_synthetic(dir.path(), &spec).unwrap();

        let raw = prepare_dataset(&manifest, InputMode::Raw, 16).unwrap();
        assert_eq!(raw.data.len(), 8);
        assert_eq!(raw.data.inputs[0].shape(), &[1, 16, 16]);

        let fused = prepare_dataset(&manifest, InputMode::Fused, 16).unwrap();
        assert_eq!(fused.data.len(), 8);
        assert_eq!(fused.data.inputs[0].shape(), &[3, 16, 16]);

        let augmented = prepare_dataset(&manifest, InputMode::Augmented, 16).unwrap();
        assert_eq!(augmented.data.len(), 24);
        assert_eq!(augmented.groups[2], vec![6, 7, 8]);
        let expanded = augmented.expand(&[0, 2]);
        assert_eq!(expanded, vec![0, 1, 2, 6, 7, 8]);
        // Labels repeat per representation.
        for (i, rows) in augmented.groups.iter().enumerate() {
            for &r in rows {
                assert_eq!(augmented.data.labels[r], manifest.samples[i].label as usize);
            }
        }
    }

    #[test]
    fn fused_channels_stay_in_unit_range_after_resampling() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            count: 4,
            patients: 4,
            malignant_fraction: 0.5,
            size: 32,
            seed: 2,
        };
        let (manifest, _) = generate_synthetic(dir.path(), &spec).unwrap();
        let fused = prepare_dataset(&manifest, InputMode::Fused, 16).unwrap();
        for t in &fused.data.inputs {
            assert!(t.data().iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
        }
    }
}
