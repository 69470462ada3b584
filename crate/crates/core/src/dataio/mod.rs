//! Dataset manifests, score-to-label mapping, patient-grouped stratified
//! split planning, and the synthetic nodule generator that stands in for
//! clinical data.

mod synth;

pub use synth::{generate_synthetic, NoduleBox, SynthSpec};

use crate::seed::derive;
use crate::texture::{read_pgm, TextureError};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum DataError {
    /// CSV problem, with the 1-based line number.
    Parse { line: usize, message: String },
    /// Score outside the 1..=5 tier range.
    InvalidScore { line: usize, score: i64 },
    MissingImage { path: PathBuf },
    BadImage { path: PathBuf, source: TextureError },
    /// Split planning cannot satisfy its constraints.
    Infeasible(String),
    /// A class required by the operation has no samples.
    ClassAbsent { label: u8 },
    Io(std::io::Error),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Parse { line, message } => write!(f, "manifest line {line}: {message}"),
            DataError::InvalidScore { line, score } => {
                write!(f, "manifest line {line}: score {score} outside 1..=5")
            }
            DataError::MissingImage { path } => write!(f, "missing image {}", path.display()),
            DataError::BadImage { path, source } => {
                write!(f, "image {} unreadable: {source}", path.display())
            }
            DataError::Infeasible(m) => write!(f, "split infeasible: {m}"),
            DataError::ClassAbsent { label } => write!(f, "no samples with label {label}"),
            DataError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// Cytological score to binary label: tiers 1 and 2 are benign, 3 to 5
/// malignant (low-risk score 3 counts as malignant so no occurrence is
/// missed).
pub fn label_from_score(score: u8) -> u8 {
    u8::from(score >= 3)
}

/// One image with its patient, cytological score, and derived label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub image_path: PathBuf,
    pub patient_id: String,
    pub score: u8,
    /// 0 benign, 1 malignant. Always derived from `score`, never stored.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    /// (benign, malignant) sample counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let malignant = self.samples.iter().filter(|s| s.label == 1).count();
        (self.samples.len() - malignant, malignant)
    }

    pub fn patient_ids(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.patient_id.as_str()).collect()
    }

    /// True when no patient appears in both manifests.
    pub fn patients_disjoint(&self, other: &DatasetManifest) -> bool {
        let mine = self.patient_ids();
        other.samples.iter().all(|s| !mine.contains(s.patient_id.as_str()))
    }
}

/// Parses the manifest CSV (`image_path,patient_id,score`), resolving
/// relative image paths against the manifest's directory and checking that
/// every image exists and parses. Labels are derived from scores.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let mut samples = Vec::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "image_path,patient_id,score" => {}
        Some((_, header)) => {
            return Err(DataError::Parse {
                line: 1,
                message: format!("bad header {header:?}, expected image_path,patient_id,score"),
            })
        }
        None => {
            return Err(DataError::Parse {
                line: 1,
                message: "empty manifest".into(),
            })
        }
    }
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("{} fields, expected 3", fields.len()),
            });
        }
        let score: i64 = fields[2].parse().map_err(|_| DataError::Parse {
            line: line_no,
            message: format!("score {:?} is not an integer", fields[2]),
        })?;
        if !(1..=5).contains(&score) {
            return Err(DataError::InvalidScore {
                line: line_no,
                score,
            });
        }
        let rel = Path::new(fields[0]);
        let image_path = if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            base.join(rel)
        };
        if !image_path.is_file() {
            return Err(DataError::MissingImage { path: image_path });
        }
        read_pgm(&image_path).map_err(|source| DataError::BadImage {
            path: image_path.clone(),
            source,
        })?;
        samples.push(Sample {
            image_path,
            patient_id: fields[1].to_string(),
            score: score as u8,
            label: label_from_score(score as u8),
        });
    }
    Ok(DatasetManifest { name, samples })
}

/// Writes a manifest back out in the canonical CSV format, with image paths
/// relative to `base` when possible.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::from("image_path,patient_id,score\n");
    for s in &manifest.samples {
        let rel = s.image_path.strip_prefix(base).unwrap_or(&s.image_path);
        out.push_str(&format!(
            "{},{},{}\n",
            rel.display(),
            s.patient_id,
            s.score
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Repeated stratified patient-grouped train/test assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_fraction: f64,
    /// Per repetition: (train sample indices, test sample indices), each
    /// sorted ascending.
    pub repetitions: Vec<(Vec<usize>, Vec<usize>)>,
}

impl SplitPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

const SPLIT_TOLERANCE: f64 = 0.05;

/// Plans `repetitions` independent stratified Monte-Carlo splits. Patients
/// never straddle train and test; stratification packs patients greedily
/// (largest first, seeded shuffle breaking ties) against per-class targets.
pub fn plan_splits(
    manifest: &DatasetManifest,
    repetitions: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitPlan, DataError> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction <= 0.0 {
        return Err(DataError::Infeasible(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    // Patients in first-appearance order, with their sample indices.
    let mut patient_order: Vec<&str> = Vec::new();
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        let slot = by_patient.entry(s.patient_id.as_str()).or_default();
        if slot.is_empty() {
            patient_order.push(&s.patient_id);
        }
        slot.push(i);
    }
    let mut class_patients = [0usize; 2];
    for indices in by_patient.values() {
        let mut has = [false; 2];
        for &i in indices {
            has[manifest.samples[i].label as usize] = true;
        }
        for c in 0..2 {
            if has[c] {
                class_patients[c] += 1;
            }
        }
    }
    for (c, &n) in class_patients.iter().enumerate() {
        if n < 2 {
            return Err(DataError::Infeasible(format!(
                "class {c} has {n} patient(s); need at least 2 to separate train and test"
            )));
        }
    }

    let totals = {
        let (b, m) = manifest.class_counts();
        [b as f64, m as f64]
    };
    let n_samples = manifest.samples.len() as f64;
    let test_fraction = 1.0 - train_fraction;
    let test_target = [totals[0] * test_fraction, totals[1] * test_fraction];

    let mut plan = SplitPlan {
        seed,
        train_fraction,
        repetitions: Vec::with_capacity(repetitions),
    };
    for rep in 0..repetitions {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x51, rep as u64]));
        let mut accepted: Option<(Vec<usize>, Vec<usize>)> = None;
        let mut last_failure = String::new();
        // Greedy packing plus local repair can stall in a local optimum on
        // awkward patient-size mixes; restarting from a fresh shuffle order
        // is cheap and finds a feasible assignment in practice.
        for attempt in 0..16 {
        let mut order: Vec<&str> = patient_order.clone();
        order.shuffle(&mut rng);
        if attempt == 0 {
            // Largest patients first so small ones can correct the balance;
            // retries keep the raw shuffle so they explore different optima.
            order.sort_by_key(|p| std::cmp::Reverse(by_patient[p].len()));
        }

        // Per-patient class counts, in assignment order.
        let p_counts: Vec<[f64; 2]> = order
            .iter()
            .map(|pid| {
                let mut c = [0.0f64; 2];
                for &i in &by_patient[pid] {
                    c[manifest.samples[i].label as usize] += 1.0;
                }
                c
            })
            .collect();
        // Deviation of a candidate test-side census from its targets; the
        // train side is complementary, so this is the whole objective.
        let objective = |test: &[f64; 2]| -> f64 {
            (0..2).map(|c| (test[c] - test_target[c]).abs()).sum()
        };

        let mut in_test = vec![false; order.len()];
        let mut test_counts = [0.0f64; 2];
        for (p, counts) in p_counts.iter().enumerate() {
            let as_test = objective(&[test_counts[0] + counts[0], test_counts[1] + counts[1]]);
            let as_train = objective(&test_counts);
            if as_test < as_train {
                in_test[p] = true;
                for c in 0..2 {
                    test_counts[c] += counts[c];
                }
            }
        }
        // Local repair: accept the best strictly-improving single move or
        // cross-side swap until a fixed point. Deterministic scan order.
        loop {
            let current = objective(&test_counts);
            let mut best: Option<(f64, usize, Option<usize>)> = None;
            for p in 0..order.len() {
                let sign = if in_test[p] { -1.0 } else { 1.0 };
                let cand = [
                    test_counts[0] + sign * p_counts[p][0],
                    test_counts[1] + sign * p_counts[p][1],
                ];
                let o = objective(&cand);
                if o < current - 1e-9 && best.as_ref().is_none_or(|b| o < b.0 - 1e-9) {
                    best = Some((o, p, None));
                }
            }
            for a in 0..order.len() {
                if !in_test[a] {
                    continue;
                }
                for b in 0..order.len() {
                    if in_test[b] {
                        continue;
                    }
                    let cand = [
                        test_counts[0] - p_counts[a][0] + p_counts[b][0],
                        test_counts[1] - p_counts[a][1] + p_counts[b][1],
                    ];
                    let o = objective(&cand);
                    if o < current - 1e-9 && best.as_ref().is_none_or(|c| o < c.0 - 1e-9) {
                        best = Some((o, a, Some(b)));
                    }
                }
            }
            match best {
                Some((_, a, Some(b))) => {
                    in_test[a] = false;
                    in_test[b] = true;
                    for c in 0..2 {
                        test_counts[c] += p_counts[b][c] - p_counts[a][c];
                    }
                }
                Some((_, p, None)) => {
                    let sign = if in_test[p] { -1.0 } else { 1.0 };
                    in_test[p] = !in_test[p];
                    for c in 0..2 {
                        test_counts[c] += sign * p_counts[p][c];
                    }
                }
                None => break,
            }
        }

        let mut train_counts = [0.0f64; 2];
        let mut train_idx: Vec<usize> = Vec::new();
        let mut test_idx: Vec<usize> = Vec::new();
        for (p, pid) in order.iter().enumerate() {
            if in_test[p] {
                test_idx.extend(&by_patient[pid]);
            } else {
                train_idx.extend(&by_patient[pid]);
                for c in 0..2 {
                    train_counts[c] += p_counts[p][c];
                }
            }
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();

        let mut failure = String::new();
        let test_frac = test_idx.len() as f64 / n_samples;
        if (test_frac - test_fraction).abs() > SPLIT_TOLERANCE {
            failure = format!(
                "repetition {rep}: test fraction {test_frac:.3} outside {test_fraction:.2} +/- {SPLIT_TOLERANCE}"
            );
        }
        let global_mal = totals[1] / n_samples;
        for (side, counts, len) in [
            ("train", &train_counts, train_idx.len()),
            ("test", &test_counts, test_idx.len()),
        ] {
            let frac = counts[1] / len.max(1) as f64;
            if failure.is_empty() && (frac - global_mal).abs() > SPLIT_TOLERANCE {
                failure = format!(
                    "repetition {rep}: {side} malignant fraction {frac:.3} outside {global_mal:.3} +/- {SPLIT_TOLERANCE}"
                );
            }
        }
        if failure.is_empty() {
            accepted = Some((train_idx, test_idx));
            break;
        }
        last_failure = failure;
        }
        match accepted {
            Some(split) => plan.repetitions.push(split),
            None => return Err(DataError::Infeasible(last_failure)),
        }
    }
    Ok(plan)
}

/// How to turn class counts into (benign, malignant) loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightMode {
    /// The fixed (0.2, 1.0) pair.
    Default,
    /// Inverse-frequency: (malignant / benign, 1.0).
    Balanced,
    Fixed(f64, f64),
}

/// Loss weights for (benign, malignant); errors if either class is absent.
pub fn class_weights(manifest: &DatasetManifest, mode: WeightMode) -> Result<(f64, f64), DataError> {
    let (benign, malignant) = manifest.class_counts();
    if benign == 0 {
        return Err(DataError::ClassAbsent { label: 0 });
    }
    if malignant == 0 {
        return Err(DataError::ClassAbsent { label: 1 });
    }
    Ok(match mode {
        WeightMode::Default => (0.2, 1.0),
        WeightMode::Balanced => (malignant as f64 / benign as f64, 1.0),
        WeightMode::Fixed(b, m) => (b, m),
    })
}
