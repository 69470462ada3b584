//! Cross-validation driver: one fresh model per repetition, trained and
//! scored on its repetition's split, aggregated into an [`EvalReport`].

use super::{auc, confusion, EvalReport, MetricsError, RepetitionRow};
use crate::dataio::SplitPlan;
use crate::seed::derive;
use rayon::prelude::*;
use std::collections::BTreeSet;

/// What a repetition runner must hand back: the malignant-class score for
/// every test sample, the labels, and the training convergence epoch.
#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub convergence_epoch: usize,
}

/// Runs every repetition of `plan` through `runner` (in parallel), checks
/// patient disjointness when `patients` maps sample indices to ids, and
/// aggregates the metric rows. Deterministic: each repetition derives its
/// seed from the plan seed and its own index.
pub fn run_cv<F>(
    model_name: &str,
    plan: &SplitPlan,
    patients: Option<&[String]>,
    runner: F,
) -> Result<EvalReport, MetricsError>
where
    F: Fn(usize, &[usize], &[usize], u64) -> Result<RepOutcome, String> + Sync,
{
    let reports = run_cv_multi(plan, patients, |rep, train, test, seed| {
        runner(rep, train, test, seed).map(|o| vec![(model_name.to_string(), o)])
    })?;
    reports
        .into_iter()
        .next()
        .ok_or_else(|| MetricsError::Repetition {
            repetition: 0,
            message: "no repetitions in plan".into(),
        })
}

/// Like [`run_cv`] but each repetition may score several models at once
/// (an experts-consult sweep shares its fine-tuned experts across EC sizes).
/// Returns one report per model name, in first-appearance order; every
/// repetition must produce the same set of names.
pub fn run_cv_multi<F>(
    plan: &SplitPlan,
    patients: Option<&[String]>,
    runner: F,
) -> Result<Vec<EvalReport>, MetricsError>
where
    F: Fn(usize, &[usize], &[usize], u64) -> Result<Vec<(String, RepOutcome)>, String> + Sync,
{
    // Defense in depth: the plan was built patient-disjoint, re-check here.
    if let Some(patients) = patients {
        for (rep, (train, test)) in plan.repetitions.iter().enumerate() {
            let train_patients: BTreeSet<&str> =
                train.iter().map(|&i| patients[i].as_str()).collect();
            for &i in test {
                if train_patients.contains(patients[i].as_str()) {
                    return Err(MetricsError::PatientLeakage {
                        repetition: rep,
                        patient: patients[i].clone(),
                    });
                }
            }
        }
    }

    let per_rep: Result<Vec<Vec<(String, RepetitionRow)>>, MetricsError> = plan
        .repetitions
        .par_iter()
        .enumerate()
        .map(|(rep, (train, test))| {
            let rep_seed = derive(plan.seed, &[0xcf, rep as u64]);
            let outcomes =
                runner(rep, train, test, rep_seed).map_err(|message| MetricsError::Repetition {
                    repetition: rep,
                    message,
                })?;
            outcomes
                .into_iter()
                .map(|(name, outcome)| {
                    if outcome.scores.len() != outcome.labels.len() {
                        return Err(MetricsError::Repetition {
                            repetition: rep,
                            message: format!(
                                "{name}: {} scores vs {} labels",
                                outcome.scores.len(),
                                outcome.labels.len()
                            ),
                        });
                    }
                    let preds: Vec<Vec<f64>> =
                        outcome.scores.iter().map(|&s| vec![1.0 - s, s]).collect();
                    let m = confusion(&preds, &outcome.labels, 0.5)?;
                    let auc_value = auc(&outcome.scores, &outcome.labels)?;
                    Ok((
                        name,
                        RepetitionRow {
                            repetition: rep,
                            accuracy: m.accuracy(),
                            sensitivity: m.sensitivity(),
                            specificity: m.specificity(),
                            auc: auc_value,
                            convergence_epoch: outcome.convergence_epoch,
                            confusion: m,
                        },
                    ))
                })
                .collect()
        })
        .collect();

    let per_rep = per_rep?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for rows in per_rep {
        for (name, row) in rows {
            match reports.iter_mut().find(|r| r.model == name) {
                Some(report) => report.rows.push(row),
                None => reports.push(EvalReport {
                    model: name,
                    rows: vec![row],
                }),
            }
        }
    }
    for report in &mut reports {
        report.rows.sort_by_key(|r| r.repetition);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::SplitPlan;

    fn toy_plan(reps: usize) -> SplitPlan {
        SplitPlan {
            seed: 99,
            train_fraction: 0.8,
            repetitions: (0..reps)
                .map(|_| ((0..8).collect(), (8..10).collect()))
                .collect(),
        }
    }

    #[test]
    fn one_row_per_repetition_and_deterministic() {
        let plan = toy_plan(10);
        let runner = |_rep: usize, _train: &[usize], test: &[usize], seed: u64| {
            let scores: Vec<f64> = test
                .iter()
                .enumerate()
                .map(|(i, _)| ((seed.wrapping_add(i as u64) % 100) as f64) / 100.0)
                .collect();
            let labels = vec![0, 1];
            Ok(RepOutcome {
                scores,
                labels,
                convergence_epoch: 3,
            })
        };
        let a = run_cv("toy", &plan, None, runner).unwrap();
        let b = run_cv("toy", &plan, None, runner).unwrap();
        assert_eq!(a.rows.len(), 10);
        assert_eq!(a, b);
    }

    #[test]
    fn leakage_check_fires() {
        let mut plan = toy_plan(1);
        plan.repetitions[0].1 = vec![0, 9]; // sample 0 is in train too
        let patients: Vec<String> = (0..10).map(|i| format!("P{i}")).collect();
        let err = run_cv("toy", &plan, Some(&patients), |_, _, _, _| {
            Ok(RepOutcome {
                scores: vec![],
                labels: vec![],
                convergence_epoch: 0,
            })
        })
        .unwrap_err();
        assert!(matches!(err, MetricsError::PatientLeakage { .. }));
    }

    #[test]
    fn runner_errors_carry_the_repetition_index() {
        let plan = toy_plan(3);
        let err = run_cv("toy", &plan, None, |rep, _, _, _| {
            if rep == 2 {
                Err("boom".to_string())
            } else {
                Ok(RepOutcome {
                    scores: vec![0.1, 0.9],
                    labels: vec![0, 1],
                    convergence_epoch: 1,
                })
            }
        })
        .unwrap_err();
        match err {
            MetricsError::Repetition { repetition, message } => {
                assert_eq!(repetition, 2);
                assert!(message.contains("boom"));
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
