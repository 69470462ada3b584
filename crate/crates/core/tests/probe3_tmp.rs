use fusecad::dataio::{generate_synthetic, SynthSpec};
use fusecad::experts::ExpertFamily;
use fusecad::nn::TrainConfig;
use fusecad::pipeline::*;

#[test]
fn probe_modes_v3() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { count: 600, patients: 200, malignant_fraction: 0.25, size: 64, seed: 4242 };
    let (bench, _) = generate_synthetic(&dir.path().join("b"), &spec).unwrap();
    for res in [16usize] {
        for mode in [InputMode::Raw, InputMode::Fused] {
            let prepared = prepare_dataset(&bench, mode, res).unwrap();
            let cfg = TrainConfig {
                learning_rate: 0.001, batch_size: 32, max_epochs: 80,
                class_weights: vec![0.2, 1.0], early_stop_patience: 10,
                early_stop_min_delta: 1e-3, seed: 913,
            };
            let pre = pretrain_families(&[ExpertFamily::PlainShallow], mode.channels(), res, 240, &cfg).unwrap();
            let train_idx: Vec<usize> = (0..480).collect();
            let (model, h, val_acc) = finetune_on(&pre[0].1, 0.25, &prepared, &train_idx, &cfg).unwrap();
            let rows: Vec<usize> = prepared.expand(&(480..600).collect::<Vec<_>>());
            let batch = prepared.data.stack(&rows);
            let preds = model.forward_probs(&batch).unwrap();
            let acc = preds.iter().zip(rows.iter().map(|&r| prepared.data.labels[r]))
                .filter(|(p, y)| usize::from(p[1] >= 0.5) == *y).count() as f64 / rows.len() as f64;
            eprintln!("res {res} {:?}: val {val_acc:.3} test {acc:.3} conv {} stop {}", mode, h.convergence_epoch, h.stopped_epoch);
        }
    }
}
