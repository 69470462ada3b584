//! Split planning under 100 random manifests: patients never straddle the
//! split, every sample is covered exactly once, and class proportions stay
//! inside the stratification tolerance.

use fusecad::dataio::{plan_splits, DatasetManifest, Sample};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::path::PathBuf;

/// Random patient-grouped manifest shaped like clinical data: 20 to 60
/// patients, 1 to 6 single-class images each, and at least five patients
/// per class (with singletons present) so stratified 80/20 splits are
/// actually realizable at patient granularity.
fn random_manifest(rng: &mut ChaCha8Rng) -> DatasetManifest {
    let patients = rng.random_range(20..=60);
    let malignant_patient_frac = rng.random_range(0.25..0.5);
    let mut samples = Vec::new();
    for p in 0..patients {
        // First ten patients pin five per class, sizes 1, 1, 2, 3, 4.
        let (malignant, n_images) = if p < 10 {
            (p % 2 == 1, [1, 1, 1, 1, 2, 2, 3, 3, 4, 4][p])
        } else {
            (rng.random_bool(malignant_patient_frac), rng.random_range(1..=6))
        };
        for i in 0..n_images {
            let score = if malignant {
                rng.random_range(3..=5)
            } else {
                rng.random_range(1..=2)
            };
            samples.push(Sample {
                image_path: PathBuf::from(format!("p{p}_{i}.pgm")),
                patient_id: format!("P{p}"),
                score,
                label: u8::from(score >= 3),
            });
        }
    }
    DatasetManifest {
        name: "random".into(),
        samples,
    }
}

#[test]
fn hundred_random_manifests_split_cleanly() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut violations = 0usize;
    for trial in 0..100 {
        let manifest = random_manifest(&mut rng);
        let (benign, malignant) = manifest.class_counts();
        let global_mal = malignant as f64 / (benign + malignant) as f64;

        let plan = match plan_splits(&manifest, 10, 0.8, 1000 + trial) {
            Ok(p) => p,
            Err(e) => panic!("trial {trial}: planning failed: {e}"),
        };
        assert_eq!(plan.repetitions.len(), 10);
        for (rep, (train, test)) in plan.repetitions.iter().enumerate() {
            // Coverage: a permutation of all indices.
            let mut all: Vec<usize> = train.iter().chain(test).copied().collect();
            all.sort_unstable();
            if all != (0..manifest.samples.len()).collect::<Vec<_>>() {
                violations += 1;
                eprintln!("trial {trial} rep {rep}: coverage broken");
                continue;
            }
            // Patient disjointness.
            let train_patients: BTreeSet<&str> = train
                .iter()
                .map(|&i| manifest.samples[i].patient_id.as_str())
                .collect();
            let leaked = test
                .iter()
                .any(|&i| train_patients.contains(manifest.samples[i].patient_id.as_str()));
            if leaked {
                violations += 1;
                eprintln!("trial {trial} rep {rep}: patient leakage");
            }
            // Stratification on both sides.
            for (side, idx) in [("train", train), ("test", test)] {
                let mal = idx
                    .iter()
                    .filter(|&&i| manifest.samples[i].label == 1)
                    .count() as f64;
                let frac = mal / idx.len() as f64;
                if (frac - global_mal).abs() > 0.05 + 1e-12 {
                    violations += 1;
                    eprintln!(
                        "trial {trial} rep {rep}: {side} malignant {frac:.3} vs global {global_mal:.3}"
                    );
                }
            }
            // Test fraction.
            let tf = test.len() as f64 / manifest.samples.len() as f64;
            if (tf - 0.2).abs() > 0.05 + 1e-12 {
                violations += 1;
                eprintln!("trial {trial} rep {rep}: test fraction {tf:.3}");
            }
        }
    }
    assert_eq!(violations, 0, "{violations} split violations");
}
