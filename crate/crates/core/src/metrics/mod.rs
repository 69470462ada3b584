//! Classification metrics (confusion counts, AUC), cross-validation
//! orchestration over split plans, and report rendering.

mod cv;
mod report;

pub use cv::{run_cv, run_cv_multi, RepOutcome};
pub use report::{render_table, write_loss_curves, write_report_csv};

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug)]
pub enum MetricsError {
    LengthMismatch { preds: usize, labels: usize },
    /// AUC needs both classes present.
    SingleClass,
    /// A test sample's patient appeared in that repetition's training set.
    PatientLeakage { repetition: usize, patient: String },
    Repetition { repetition: usize, message: String },
    Io(std::io::Error),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::LengthMismatch { preds, labels } => {
                write!(f, "{preds} predictions vs {labels} labels")
            }
            MetricsError::SingleClass => write!(f, "metric needs both classes present"),
            MetricsError::PatientLeakage { repetition, patient } => {
                write!(f, "repetition {repetition}: patient {patient} in train and test")
            }
            MetricsError::Repetition { repetition, message } => {
                write!(f, "repetition {repetition}: {message}")
            }
            MetricsError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for MetricsError {}

impl From<std::io::Error> for MetricsError {
    fn from(e: std::io::Error) -> Self {
        MetricsError::Io(e)
    }
}

/// Binary confusion counts with malignant (label 1) as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// True-positive rate; recall of the malignant class.
    pub fn sensitivity(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            return 0.0;
        }
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    /// True-negative rate; recall of the benign class.
    pub fn specificity(&self) -> f64 {
        if self.tn + self.fp == 0 {
            return 0.0;
        }
        self.tn as f64 / (self.tn + self.fp) as f64
    }
}

/// Counts predictions against labels: positive when the malignant
/// probability is at least `threshold`.
pub fn confusion(
    preds: &[Vec<f64>],
    labels: &[usize],
    threshold: f64,
) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut m = ConfusionMatrix {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (p, &y) in preds.iter().zip(labels) {
        let positive = p[1] >= threshold;
        match (positive, y == 1) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, false) => m.tn += 1,
            (false, true) => m.fn_ += 1,
        }
    }
    Ok(m)
}

/// Area under the ROC curve by trapezoidal sweep over the distinct score
/// thresholds. Tied scores advance both axes at once, which makes the
/// result equal to the rank (Mann-Whitney) statistic with half credit for
/// ties.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut area = 0.0f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        // Group all samples sharing this score.
        let score = scores[order[i]];
        let (mut dtp, mut dfp) = (0usize, 0usize);
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        // Trapezoid between the previous and the new ROC point.
        area += dfp as f64 * (tp as f64 + dtp as f64 / 2.0);
        tp += dtp;
        fp += dfp;
    }
    debug_assert_eq!((tp, fp), (positives, negatives));
    Ok(area / (positives as f64 * negatives as f64))
}

/// One cross-validation repetition's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRow {
    pub repetition: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    pub convergence_epoch: usize,
    pub confusion: ConfusionMatrix,
}

/// Aggregated cross-validation report: raw per-repetition rows plus
/// mean and sample standard deviation per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub rows: Vec<RepetitionRow>,
}

/// Mean and sample (n-1) standard deviation; std is 0 for one repetition.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn accuracy(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.accuracy).collect::<Vec<_>>())
    }

    pub fn sensitivity(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.sensitivity).collect::<Vec<_>>())
    }

    pub fn specificity(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.specificity).collect::<Vec<_>>())
    }

    pub fn auc(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.auc).collect::<Vec<_>>())
    }

    pub fn convergence_epoch(&self) -> (f64, f64) {
        mean_std(
            &self
                .rows
                .iter()
                .map(|r| r.convergence_epoch as f64)
                .collect::<Vec<_>>(),
        )
    }
}
