use crate::{Cli, Command, ExperimentCommand, TrainOpts};
use anyhow::{anyhow, Context};
use fusecad::dataio::{
    generate_synthetic, load_manifest, plan_splits, DatasetManifest, SynthSpec,
};
use fusecad::experts::{
    load_ensemble, save_ensemble, EnsembleDescriptor, ExpertFamily,
};
use fusecad::gradcam::{gradcam_kdl, overlay, LayerSelect};
use fusecad::kdl::{
    dir_content_hash, load_kdl, save_kdl, CueJoin, CueSource, KdlDescriptor, KdlModel,
};
use fusecad::metrics::{render_table, write_loss_curves, write_report_csv, EvalReport};
use fusecad::nn::{load_model, save_model, ModelGraph, TrainConfig};
use fusecad::pipeline::{
    build_trained_consult, prepare_dataset, pretrain_families, run_ec_cv, run_expert_cv,
    run_student_cv, train_student, ConsultSource, InputMode,
};
use fusecad::seed::derive;
use fusecad::tensor::Tensor;
use fusecad::texture::{featurize, plane_to_gray, read_pgm, write_pgm, dwt_image, lbp_image};
use serde::Deserialize;
use std::path::{Path, PathBuf};

pub enum CliError {
    /// Bad flags or inputs the user can fix; exit code 2.
    Usage(String),
    /// Everything else; exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

/// Optional defaults loaded from `--config`; explicit flags win.
#[derive(Debug, Default, Deserialize)]
struct FileDefaults {
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    patience: Option<usize>,
    min_delta: Option<f64>,
    class_weights: Option<String>,
}

struct Resolved {
    config: TrainConfig,
    weights_spec: String,
}

fn resolve_train(
    opts: &TrainOpts,
    file: &FileDefaults,
    manifest: Option<&DatasetManifest>,
    seed: u64,
) -> Result<Resolved, CliError> {
    let weights_spec = opts
        .class_weights
        .clone()
        .or_else(|| file.class_weights.clone())
        .unwrap_or_else(|| "0.2,1".to_string());
    let class_weights = match weights_spec.as_str() {
        "balanced" => {
            let manifest = manifest
                .ok_or_else(|| usage("balanced class weights need a manifest-based command"))?;
            let (b, m) = fusecad::dataio::class_weights(
                manifest,
                fusecad::dataio::WeightMode::Balanced,
            )
            .map_err(|e| usage(e.to_string()))?;
            vec![b, m]
        }
        pair => {
            let parts: Vec<&str> = pair.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(usage(format!(
                    "class weights {pair:?}: expected \"B,M\" or \"balanced\""
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| usage(format!("class weight {s:?} is not a number")))
            };
            vec![parse(parts[0])?, parse(parts[1])?]
        }
    };
    let config = TrainConfig {
        learning_rate: opts.learning_rate.or(file.learning_rate).unwrap_or(0.001),
        batch_size: opts.batch_size.or(file.batch_size).unwrap_or(32),
        max_epochs: opts.epochs.or(file.epochs).unwrap_or(1000),
        class_weights,
        early_stop_patience: opts.patience.or(file.patience).unwrap_or(50),
        early_stop_min_delta: opts.min_delta.or(file.min_delta).unwrap_or(0.0),
        seed,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(Resolved {
        config,
        weights_spec,
    })
}

fn load_file_defaults(path: Option<&PathBuf>) -> Result<FileDefaults, CliError> {
    match path {
        None => Ok(FileDefaults::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn parse_mode(s: &str) -> Result<InputMode, CliError> {
    s.parse::<InputMode>().map_err(usage)
}

fn parse_modes(s: &str) -> Result<Vec<InputMode>, CliError> {
    s.split(',').map(|m| parse_mode(m.trim())).collect()
}

fn parse_families(s: &str) -> Result<Vec<ExpertFamily>, CliError> {
    if s == "all" {
        return Ok(ExpertFamily::ALL.to_vec());
    }
    s.split(',')
        .map(|name| {
            ExpertFamily::from_name(name.trim())
                .ok_or_else(|| usage(format!("unknown expert family {name:?}")))
        })
        .collect()
}

fn parse_pair(s: &str, what: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(usage(format!("{what} {s:?}: expected \"a,b\"")));
    }
    let parse = |p: &str| {
        p.parse::<usize>()
            .map_err(|_| usage(format!("{what} component {p:?} is not an integer")))
    };
    Ok((parse(parts[0])?, parse(parts[1])?))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| usage(format!("{what} component {p:?} failed to parse")))
        })
        .collect()
}

fn parse_cue_join(s: &str) -> Result<CueJoin, CliError> {
    match s {
        "features" => Ok(CueJoin::Features),
        "probabilities" => Ok(CueJoin::Probabilities),
        other => Err(usage(format!(
            "cue join {other:?} (features|probabilities)"
        ))),
    }
}

fn write_run_config(dir: &Path, value: serde_json::Value) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::from)?;
    std::fs::write(
        dir.join("run_config.json"),
        serde_json::to_string_pretty(&value).expect("config serializes"),
    )
    .context("writing run_config.json")?;
    Ok(())
}

fn load_manifest_usage(path: &Path) -> Result<DatasetManifest, CliError> {
    load_manifest(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Loads every `<family>.fct/.json` checkpoint present in a pretrain
/// output directory.
fn load_pretrained_dir(dir: &Path) -> Result<Vec<(ExpertFamily, ModelGraph, f64)>, CliError> {
    let mut out = Vec::new();
    for family in ExpertFamily::ALL {
        let base = dir.join(family.name());
        if !base.with_extension("json").is_file() {
            continue;
        }
        let (model, sidecar) = load_model(&base)
            .map_err(|e| usage(format!("pretrained {}: {e}", base.display())))?;
        let val_acc = sidecar
            .history
            .as_ref()
            .map(|h| h.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max))
            .unwrap_or(0.0);
        out.push((family, model, val_acc));
    }
    if out.is_empty() {
        return Err(usage(format!(
            "no pretrained family checkpoints under {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn save_report(
    out_dir: &Path,
    name: &str,
    report: &EvalReport,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).context("creating report dir")?;
    write_report_csv(&out_dir.join(format!("{name}.report.csv")), report)
        .map_err(|e| anyhow!("{e}"))?;
    std::fs::write(
        out_dir.join(format!("{name}.report.json")),
        serde_json::to_string_pretty(report).expect("report serializes"),
    )
    .context("writing report json")?;
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file_defaults = load_file_defaults(cli.config.as_ref())?;
    let seed = cli.seed;
    match cli.command {
        Command::Generate {
            out,
            count,
            patients,
            malignant_fraction,
            size,
        } => {
            if count == 0 {
                return Err(usage("--count must be at least 1"));
            }
            let spec = SynthSpec {
                count,
                patients,
                malignant_fraction,
                size,
                seed,
            };
            let (manifest, _) =
                generate_synthetic(&out, &spec).map_err(|e| usage(e.to_string()))?;
            let (benign, malignant) = manifest.class_counts();
            write_run_config(
                &out,
                serde_json::json!({
                    "command": "generate", "count": count, "patients": patients,
                    "malignant_fraction": malignant_fraction, "size": size, "seed": seed,
                }),
            )?;
            println!(
                "wrote {} samples ({benign} benign / {malignant} malignant) under {}",
                manifest.samples.len(),
                out.display()
            );
            Ok(())
        }

        Command::Featurize { manifest, out } => {
            let m = load_manifest_usage(&manifest)?;
            let out_dir = out
                .or_else(|| std::env::var_os("FUSECAD_CACHE").map(PathBuf::from))
                .unwrap_or_else(|| {
                    manifest
                        .parent()
                        .unwrap_or(Path::new("."))
                        .join("fusion_cache")
                });
            std::fs::create_dir_all(&out_dir).context("creating cache dir")?;
            for sample in &m.samples {
                let img = read_pgm(&sample.image_path).map_err(|e| anyhow!("{e}"))?;
                let stem = sample
                    .image_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image".into());
                let fused = featurize(&img);
                let mut file = std::io::BufWriter::new(
                    std::fs::File::create(out_dir.join(format!("{stem}.fusion.fct")))
                        .context("creating fusion cache file")?,
                );
                fused.write_to(&mut file).map_err(|e| anyhow!("{e}"))?;
                write_pgm(&out_dir.join(format!("{stem}.lbp.pgm")), &lbp_image(&img))
                    .map_err(|e| anyhow!("{e}"))?;
                write_pgm(
                    &out_dir.join(format!("{stem}.dwt.pgm")),
                    &plane_to_gray(&dwt_image(&img)),
                )
                .map_err(|e| anyhow!("{e}"))?;
            }
            write_run_config(
                &out_dir,
                serde_json::json!({
                    "command": "featurize", "manifest": manifest, "seed": seed,
                }),
            )?;
            println!("cached {} fusion objects under {}", m.samples.len(), out_dir.display());
            Ok(())
        }

        Command::Pretrain {
            families,
            input_mode,
            resolution,
            proxy_images,
            out,
            train,
        } => {
            let families = parse_families(&families)?;
            let mode = parse_mode(&input_mode)?;
            let resolved = resolve_train(&train, &file_defaults, None, seed)?;
            let trained = pretrain_families(
                &families,
                mode.channels(),
                resolution,
                proxy_images,
                &resolved.config,
            )
            .map_err(|e| anyhow!("{e}"))?;
            std::fs::create_dir_all(&out).context("creating output dir")?;
            let mut accs = serde_json::Map::new();
            for (family, model, val_acc) in &trained {
                save_model(&out.join(family.name()), model, Some(&resolved.config), None)
                    .map_err(|e| anyhow!("{e}"))?;
                accs.insert(family.name().into(), serde_json::json!(val_acc));
                println!("{family}: proxy val accuracy {val_acc:.3}");
            }
            write_run_config(
                &out,
                serde_json::json!({
                    "command": "pretrain", "families": families.iter().map(|f| f.name()).collect::<Vec<_>>(),
                    "input_mode": mode.name(), "resolution": resolution,
                    "proxy_images": proxy_images, "seed": seed,
                    "class_weights": resolved.weights_spec, "proxy_val_accuracy": accs,
                }),
            )?;
            Ok(())
        }

        Command::Finetune {
            pretrained,
            manifest,
            freeze,
            input_mode,
            resolution,
            out,
            train,
        } => {
            let m = load_manifest_usage(&manifest)?;
            let mode = parse_mode(&input_mode)?;
            let resolved = resolve_train(&train, &file_defaults, Some(&m), seed)?;
            let (model, _) = load_model(&pretrained)
                .map_err(|e| usage(format!("pretrained {}: {e}", pretrained.display())))?;
            let prepared =
                prepare_dataset(&m, mode, resolution).map_err(|e| anyhow!("{e}"))?;
            let all: Vec<usize> = (0..m.samples.len()).collect();
            let (tuned, history, val_acc) = fusecad::pipeline::finetune_on(
                &model,
                freeze,
                &prepared,
                &all,
                &resolved.config,
            )
            .map_err(|e| anyhow!("{e}"))?;
            save_model(&out, &tuned, Some(&resolved.config), Some(&history))
                .map_err(|e| anyhow!("{e}"))?;
            if let Some(dir) = out.parent() {
                write_loss_curves(&dir.join("finetune_curve.csv"), &history)
                    .map_err(|e| anyhow!("{e}"))?;
                write_run_config(
                    dir,
                    serde_json::json!({
                        "command": "finetune", "pretrained": pretrained, "manifest": manifest,
                        "freeze": freeze, "input_mode": mode.name(), "resolution": resolution,
                        "seed": seed, "class_weights": resolved.weights_spec,
                        "best_val_accuracy": val_acc,
                    }),
                )?;
            }
            println!(
                "fine-tuned (freeze {freeze}): best val accuracy {val_acc:.3}, converged at epoch {}",
                history.convergence_epoch
            );
            Ok(())
        }

        Command::Consult {
            pretrained_dir,
            manifest,
            size,
            freeze,
            input_mode,
            resolution,
            head_sizes,
            out,
            train,
        } => {
            let m = load_manifest_usage(&manifest)?;
            let mode = parse_mode(&input_mode)?;
            let head_sizes = parse_pair(&head_sizes, "head sizes")?;
            let resolved = resolve_train(&train, &file_defaults, Some(&m), seed)?;
            let pretrained = load_pretrained_dir(&pretrained_dir)?;
            let prepared =
                prepare_dataset(&m, mode, resolution).map_err(|e| anyhow!("{e}"))?;
            let all: Vec<usize> = (0..m.samples.len()).collect();
            let (ensemble, selection) = build_trained_consult(
                &pretrained,
                size,
                freeze,
                head_sizes,
                &prepared,
                &all,
                &resolved.config,
            )
            .map_err(|e| anyhow!("{e}"))?;
            let descriptor = EnsembleDescriptor {
                n: size,
                families: selection.iter().map(|(f, _)| f.name().to_string()).collect(),
                head_sizes,
                selection_scores: selection.iter().map(|(_, a)| *a).collect(),
                finetune_patients: m
                    .patient_ids()
                    .into_iter()
                    .map(str::to_string)
                    .collect(),
                freeze_fraction: freeze,
                input_mode: mode.name().to_string(),
                resolution,
            };
            save_ensemble(&out, &ensemble, &descriptor).map_err(|e| anyhow!("{e}"))?;
            write_run_config(
                &out,
                serde_json::json!({
                    "command": "consult", "manifest": manifest, "size": size,
                    "freeze": freeze, "input_mode": mode.name(), "resolution": resolution,
                    "head_sizes": head_sizes, "seed": seed,
                    "class_weights": resolved.weights_spec,
                    "selection": descriptor.families,
                }),
            )?;
            println!(
                "consult EC-{size} saved to {} (members: {})",
                out.display(),
                descriptor.families.join(", ")
            );
            Ok(())
        }

        Command::Kdl {
            consult_bundle,
            train_manifest,
            cue_join,
            feature_width,
            allow_patient_overlap,
            out,
            train,
        } => {
            let m = load_manifest_usage(&train_manifest)?;
            let cue_join = parse_cue_join(&cue_join)?;
            let resolved = resolve_train(&train, &file_defaults, Some(&m), seed)?;
            let (ensemble, descriptor) =
                load_ensemble(&consult_bundle).map_err(|e| usage(e.to_string()))?;
            check_overlap(&m, &descriptor, allow_patient_overlap)?;
            let mode = parse_mode(&descriptor.input_mode)?;
            let prepared = prepare_dataset(&m, mode, descriptor.resolution)
                .map_err(|e| anyhow!("{e}"))?;
            let all: Vec<usize> = (0..m.samples.len()).collect();
            let (model, history) = train_student(
                CueSource::Ensemble(ensemble.clone()),
                cue_join,
                feature_width,
                descriptor.head_sizes,
                &prepared,
                &all,
                &resolved.config,
            )
            .map_err(|e| anyhow!("{e}"))?;
            save_kdl_bundle(&out, &model, &ensemble, &descriptor, cue_join, Some(&history))?;
            write_loss_curves(&out.join("train_curve.csv"), &history)
                .map_err(|e| anyhow!("{e}"))?;
            write_run_config(
                &out,
                serde_json::json!({
                    "command": "kdl", "consult_bundle": consult_bundle,
                    "train_manifest": train_manifest, "cue_join": format!("{cue_join:?}"),
                    "feature_width": feature_width, "seed": seed,
                    "class_weights": resolved.weights_spec,
                    "convergence_epoch": history.convergence_epoch,
                }),
            )?;
            println!(
                "kdl student saved to {} (converged at epoch {})",
                out.display(),
                history.convergence_epoch
            );
            Ok(())
        }

        Command::Experiment(exp) => experiment(exp, &file_defaults, seed),

        Command::Explain {
            bundles,
            images,
            modes,
            alpha,
            target,
            out,
        } => explain(&bundles, &images, &modes, alpha, &target, &out, seed),

        Command::Report { inputs, out } => {
            let mut reports = Vec::new();
            for input in &inputs {
                let mut files = Vec::new();
                if input.is_dir() {
                    for entry in std::fs::read_dir(input).context("reading report dir")? {
                        let path = entry.context("reading report dir")?.path();
                        if path
                            .file_name()
                            .map(|n| n.to_string_lossy().ends_with(".report.json"))
                            .unwrap_or(false)
                        {
                            files.push(path);
                        }
                    }
                    files.sort();
                } else {
                    files.push(input.clone());
                }
                for file in files {
                    let text = std::fs::read_to_string(&file)
                        .map_err(|e| usage(format!("{}: {e}", file.display())))?;
                    let report: EvalReport = serde_json::from_str(&text)
                        .map_err(|e| usage(format!("{}: {e}", file.display())))?;
                    reports.push(report);
                }
            }
            if reports.is_empty() {
                return Err(usage("no report JSON files found"));
            }
            let table = render_table(&reports);
            match out {
                Some(path) => std::fs::write(&path, table).context("writing table")?,
                None => print!("{table}"),
            }
            Ok(())
        }
    }
}

fn check_overlap(
    manifest: &DatasetManifest,
    descriptor: &EnsembleDescriptor,
    allow: bool,
) -> Result<(), CliError> {
    let overlapping: Vec<&str> = manifest
        .patient_ids()
        .into_iter()
        .filter(|p| descriptor.finetune_patients.iter().any(|q| q == p))
        .collect();
    if !overlapping.is_empty() && !allow {
        return Err(usage(format!(
            "patient leakage: {} patient(s) (e.g. {}) appear in both the consult's \
             fine-tuning data and this manifest; pass --allow-patient-overlap for a biased \
             in-domain run",
            overlapping.len(),
            overlapping[0],
        )));
    }
    Ok(())
}

/// Saves a self-contained KDL bundle: student + head + an embedded copy of
/// the consult, referenced by content hash.
fn save_kdl_bundle(
    out: &Path,
    model: &KdlModel,
    ensemble: &fusecad::experts::ConsultEnsemble,
    ec_descriptor: &EnsembleDescriptor,
    cue_join: CueJoin,
    history: Option<&fusecad::nn::TrainHistory>,
) -> Result<(), CliError> {
    let consult_dir = out.join("consult");
    save_ensemble(&consult_dir, ensemble, ec_descriptor).map_err(|e| anyhow!("{e}"))?;
    let descriptor = KdlDescriptor {
        cue_join,
        head_sizes: model.head_sizes,
        consult_hash: dir_content_hash(&consult_dir).context("hashing consult")?,
        input_mode: ec_descriptor.input_mode.clone(),
        resolution: ec_descriptor.resolution,
    };
    save_kdl(out, model, &descriptor, history).map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

fn load_kdl_bundle(dir: &Path) -> Result<(KdlModel, KdlDescriptor), CliError> {
    let consult_dir = dir.join("consult");
    let (ensemble, _) =
        load_ensemble(&consult_dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    load_kdl(dir, CueSource::Ensemble(ensemble), Some(&consult_dir))
        .map_err(|e| usage(format!("{}: {e}", dir.display())))
}

fn experiment(
    exp: ExperimentCommand,
    file_defaults: &FileDefaults,
    seed: u64,
) -> Result<(), CliError> {
    match exp {
        ExperimentCommand::Grid {
            manifest,
            families,
            inputs,
            freeze,
            repetitions,
            train_fraction,
            resolution,
            proxy_images,
            out,
            train,
        } => {
            let m = load_manifest_usage(&manifest)?;
            let families = parse_families(&families)?;
            let modes = parse_modes(&inputs)?;
            let freezes: Vec<f64> = parse_list(&freeze, "freeze fraction")?;
            let resolved = resolve_train(&train, file_defaults, Some(&m), seed)?;
            let plan = plan_splits(&m, repetitions, train_fraction, derive(seed, &[0x40]))
                .map_err(|e| usage(e.to_string()))?;
            std::fs::create_dir_all(&out).context("creating output dir")?;
            std::fs::write(out.join("split_plan.json"), plan.to_json())
                .context("writing split plan")?;

            let mut reports = Vec::new();
            for &mode in &modes {
                let pretrained = pretrain_families(
                    &families,
                    mode.channels(),
                    resolution,
                    proxy_images,
                    &with_seed(&resolved.config, derive(seed, &[0x41, mode.channels() as u64])),
                )
                .map_err(|e| anyhow!("{e}"))?;
                let prepared =
                    prepare_dataset(&m, mode, resolution).map_err(|e| anyhow!("{e}"))?;
                for (fi, (family, model, _)) in pretrained.iter().enumerate() {
                    for &fraction in &freezes {
                        let name = format!(
                            "{}-{}-f{:02}",
                            family.name(),
                            mode.name(),
                            (fraction * 100.0).round() as usize
                        );
                        let report = run_expert_cv(
                            &name,
                            model,
                            fraction,
                            &prepared,
                            &plan,
                            &with_seed(
                                &resolved.config,
                                derive(seed, &[0x42, fi as u64, (fraction * 100.0) as u64]),
                            ),
                        )
                        .map_err(|e| anyhow!("{e}"))?;
                        save_report(&out, &name, &report)?;
                        reports.push(report);
                    }
                }
            }
            let table = render_table(&reports);
            std::fs::write(out.join("table.txt"), &table).context("writing table")?;
            print!("{table}");
            write_run_config(
                &out,
                serde_json::json!({
                    "command": "experiment grid", "manifest": manifest,
                    "families": families.iter().map(|f| f.name()).collect::<Vec<_>>(),
                    "inputs": modes.iter().map(|m| m.name()).collect::<Vec<_>>(),
                    "freeze": freezes, "repetitions": repetitions,
                    "train_fraction": train_fraction, "resolution": resolution,
                    "proxy_images": proxy_images, "seed": seed,
                    "class_weights": resolved.weights_spec,
                }),
            )?;
            Ok(())
        }

        ExperimentCommand::Ec {
            manifest,
            sizes,
            freeze,
            input_mode,
            repetitions,
            train_fraction,
            resolution,
            proxy_images,
            head_sizes,
            out,
            train,
        } => {
            let m = load_manifest_usage(&manifest)?;
            let sizes: Vec<usize> = parse_list(&sizes, "consult size")?;
            if sizes.iter().any(|&n| n < 2) {
                return Err(usage("consult sizes must be at least 2"));
            }
            let mode = parse_mode(&input_mode)?;
            let head_sizes = parse_pair(&head_sizes, "head sizes")?;
            let resolved = resolve_train(&train, file_defaults, Some(&m), seed)?;
            let plan = plan_splits(&m, repetitions, train_fraction, derive(seed, &[0x43]))
                .map_err(|e| usage(e.to_string()))?;
            let pretrained = pretrain_families(
                &ExpertFamily::ALL,
                mode.channels(),
                resolution,
                proxy_images,
                &with_seed(&resolved.config, derive(seed, &[0x44])),
            )
            .map_err(|e| anyhow!("{e}"))?;
            let prepared = prepare_dataset(&m, mode, resolution).map_err(|e| anyhow!("{e}"))?;
            let reports = run_ec_cv(
                &pretrained,
                &sizes,
                freeze,
                head_sizes,
                &prepared,
                &plan,
                &resolved.config,
            )
            .map_err(|e| anyhow!("{e}"))?;
            std::fs::create_dir_all(&out).context("creating output dir")?;
            std::fs::write(out.join("split_plan.json"), plan.to_json())
                .context("writing split plan")?;
            for report in &reports {
                save_report(&out, &report.model.to_lowercase(), report)?;
            }
            let table = render_table(&reports);
            std::fs::write(out.join("table.txt"), &table).context("writing table")?;
            print!("{table}");
            write_run_config(
                &out,
                serde_json::json!({
                    "command": "experiment ec", "manifest": manifest, "sizes": sizes,
                    "freeze": freeze, "input_mode": mode.name(),
                    "repetitions": repetitions, "train_fraction": train_fraction,
                    "resolution": resolution, "proxy_images": proxy_images,
                    "head_sizes": head_sizes, "seed": seed,
                    "class_weights": resolved.weights_spec,
                }),
            )?;
            Ok(())
        }

        ExperimentCommand::Kdl {
            train_manifest,
            consult_size,
            consult_bundle,
            cue_join,
            feature_width,
            freeze,
            input_mode,
            repetitions,
            train_fraction,
            resolution,
            proxy_images,
            head_sizes,
            allow_patient_overlap,
            out,
            train,
        } => {
            let m = load_manifest_usage(&train_manifest)?;
            let cue_join = parse_cue_join(&cue_join)?;
            let head_sizes = parse_pair(&head_sizes, "head sizes")?;
            let resolved = resolve_train(&train, file_defaults, Some(&m), seed)?;
            let plan = plan_splits(&m, repetitions, train_fraction, derive(seed, &[0x45]))
                .map_err(|e| usage(e.to_string()))?;

            // Holders so the borrowed ConsultSource outlives the match arms.
            let fixed_ensemble;
            let pretrained;
            let (mode, resolution, source, source_desc) =
                match (&consult_bundle, consult_size) {
                    (Some(bundle), _) => {
                        let (ensemble, descriptor) =
                            load_ensemble(bundle).map_err(|e| usage(e.to_string()))?;
                        check_overlap(&m, &descriptor, allow_patient_overlap)?;
                        let mode = parse_mode(&descriptor.input_mode)?;
                        fixed_ensemble = ensemble;
                        (
                            mode,
                            descriptor.resolution,
                            ConsultSource::Fixed(&fixed_ensemble),
                            format!("bundle:{}", bundle.display()),
                        )
                    }
                    (None, Some(n)) => {
                        if n < 2 {
                            return Err(usage("consult size must be at least 2"));
                        }
                        let mode = parse_mode(&input_mode)?;
                        pretrained = pretrain_families(
                            &ExpertFamily::ALL,
                            mode.channels(),
                            resolution,
                            proxy_images,
                            &with_seed(&resolved.config, derive(seed, &[0x46])),
                        )
                        .map_err(|e| anyhow!("{e}"))?;
                        (
                            mode,
                            resolution,
                            ConsultSource::PerRepetition {
                                pretrained: &pretrained,
                                n,
                                freeze_fraction: freeze,
                                head_sizes,
                            },
                            format!("per-repetition EC-{n}"),
                        )
                    }
                    (None, None) => {
                        return Err(usage(
                            "experiment kdl needs --consult-size or --consult-bundle",
                        ))
                    }
                };
            let prepared = prepare_dataset(&m, mode, resolution).map_err(|e| anyhow!("{e}"))?;
            let name = match consult_size {
                Some(n) => format!("KDL-EC-{n}"),
                None => "KDL-EC".to_string(),
            };
            let (report, histories) = run_student_cv(
                &name,
                Some(source),
                cue_join,
                feature_width,
                head_sizes,
                &prepared,
                &plan,
                &resolved.config,
            )
            .map_err(|e| anyhow!("{e}"))?;
            std::fs::create_dir_all(&out).context("creating output dir")?;
            std::fs::write(out.join("split_plan.json"), plan.to_json())
                .context("writing split plan")?;
            save_report(&out, &name.to_lowercase(), &report)?;
            for (rep, history) in histories.iter().enumerate() {
                write_loss_curves(&out.join(format!("rep{rep:02}_curve.csv")), history)
                    .map_err(|e| anyhow!("{e}"))?;
            }
            let table = render_table(&[report]);
            std::fs::write(out.join("table.txt"), &table).context("writing table")?;
            print!("{table}");
            write_run_config(
                &out,
                serde_json::json!({
                    "command": "experiment kdl", "train_manifest": train_manifest,
                    "consult": source_desc, "cue_join": format!("{cue_join:?}"),
                    "feature_width": feature_width, "freeze": freeze,
                    "input_mode": mode.name(), "repetitions": repetitions,
                    "train_fraction": train_fraction, "resolution": resolution,
                    "head_sizes": head_sizes, "seed": seed,
                    "class_weights": resolved.weights_spec,
                }),
            )?;
            Ok(())
        }

        ExperimentCommand::Unaided {
            manifest,
            cue_join,
            feature_width,
            input_mode,
            repetitions,
            train_fraction,
            resolution,
            head_sizes,
            out,
            train,
        } => {
            let m = load_manifest_usage(&manifest)?;
            let cue_join = parse_cue_join(&cue_join)?;
            let mode = parse_mode(&input_mode)?;
            let head_sizes = parse_pair(&head_sizes, "head sizes")?;
            let resolved = resolve_train(&train, file_defaults, Some(&m), seed)?;
            let plan = plan_splits(&m, repetitions, train_fraction, derive(seed, &[0x47]))
                .map_err(|e| usage(e.to_string()))?;
            let prepared = prepare_dataset(&m, mode, resolution).map_err(|e| anyhow!("{e}"))?;
            let (report, histories) = run_student_cv(
                "Unaided",
                None,
                cue_join,
                feature_width,
                head_sizes,
                &prepared,
                &plan,
                &resolved.config,
            )
            .map_err(|e| anyhow!("{e}"))?;
            std::fs::create_dir_all(&out).context("creating output dir")?;
            save_report(&out, "unaided", &report)?;
            for (rep, history) in histories.iter().enumerate() {
                write_loss_curves(&out.join(format!("rep{rep:02}_curve.csv")), history)
                    .map_err(|e| anyhow!("{e}"))?;
            }
            let table = render_table(&[report]);
            std::fs::write(out.join("table.txt"), &table).context("writing table")?;
            print!("{table}");
            write_run_config(
                &out,
                serde_json::json!({
                    "command": "experiment unaided", "manifest": manifest,
                    "cue_join": format!("{cue_join:?}"), "feature_width": feature_width,
                    "input_mode": mode.name(), "repetitions": repetitions,
                    "train_fraction": train_fraction, "resolution": resolution,
                    "head_sizes": head_sizes, "seed": seed,
                    "class_weights": resolved.weights_spec,
                }),
            )?;
            Ok(())
        }
    }
}

fn with_seed(config: &TrainConfig, seed: u64) -> TrainConfig {
    let mut c = config.clone();
    c.seed = seed;
    c
}

/// Network input for one image under a mode at a bundle's resolution.
/// Augmented-mode explanations feed the raw US plane (the first of the
/// three separate representations) through the 1-channel model.
fn explain_input(img: &fusecad::texture::GrayImage, mode: InputMode, resolution: usize) -> Tensor {
    let fused = featurize(img);
    let (w, h) = (fused.width(), fused.height());
    let down = |plane: &[f64]| {
        fusecad::texture::resample_area(plane, w, h, resolution, resolution)
    };
    match mode {
        InputMode::Fused => {
            let mut data = Vec::with_capacity(3 * resolution * resolution);
            for c in 0..3 {
                data.extend(down(fused.channel(c)));
            }
            Tensor::new(vec![3, resolution, resolution], data).expect("plane size")
        }
        InputMode::Raw | InputMode::Augmented => {
            Tensor::new(vec![1, resolution, resolution], down(fused.channel(0)))
                .expect("plane size")
        }
    }
}

fn explain(
    bundles: &Path,
    images: &str,
    modes: &str,
    alpha: f64,
    target: &str,
    out: &Path,
    seed: u64,
) -> Result<(), CliError> {
    let modes = parse_modes(modes)?;
    let image_paths: Vec<PathBuf> = images.split(',').map(|s| PathBuf::from(s.trim())).collect();
    if image_paths.is_empty() {
        return Err(usage("--images needs at least one path"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(usage(format!("alpha {alpha} outside [0, 1]")));
    }
    std::fs::create_dir_all(out).context("creating output dir")?;

    for &mode in &modes {
        let bundle_dir = if bundles.join(mode.name()).is_dir() {
            bundles.join(mode.name())
        } else {
            bundles.to_path_buf()
        };
        let (model, descriptor) = load_kdl_bundle(&bundle_dir)?;
        if parse_mode(&descriptor.input_mode)? != mode && !bundles.join(mode.name()).is_dir() {
            return Err(usage(format!(
                "bundle {} was trained for {} input, not {}; provide per-mode bundles",
                bundle_dir.display(),
                descriptor.input_mode,
                mode.name()
            )));
        }
        for path in &image_paths {
            let img = read_pgm(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let input = explain_input(&img, mode, descriptor.resolution);
            let mut batch_shape = vec![1];
            batch_shape.extend_from_slice(input.shape());
            let batch =
                Tensor::new(batch_shape, input.data().to_vec()).expect("batch of one");
            let probs = model.predict(&batch).map_err(|e| anyhow!("{e}"))?;
            let target_class = match target {
                "predicted" => usize::from(probs[0][1] >= probs[0][0]),
                "benign" => 0,
                "malignant" => 1,
                other => return Err(usage(format!("target {other:?} (predicted|benign|malignant)"))),
            };
            let map = gradcam_kdl(&model, &input, target_class, &LayerSelect::LastConv)
                .map_err(|e| anyhow!("{e}"))?;
            // Back to native size: account for the odd-dimension padding the
            // featurizer applied, then crop it away.
            let fused = featurize(&img);
            let padded = map.resize(fused.width(), fused.height());
            let native = padded.crop(fused.pad_right, fused.pad_bottom);
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let class_name = if target_class == 1 { "malignant" } else { "benign" };
            let out_path = out.join(format!("{stem}_{}_{class_name}.ppm", mode.name()));
            overlay(&out_path, &img, &native, alpha).map_err(|e| anyhow!("{e}"))?;
            println!("{}", out_path.display());
        }
    }
    write_run_config(
        out,
        serde_json::json!({
            "command": "explain", "bundles": bundles, "alpha": alpha,
            "target": target, "modes": modes.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "seed": seed,
        }),
    )?;
    Ok(())
}
