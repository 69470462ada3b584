//! End-to-end checks of the `fusecad` binary: exit-code contract,
//! determinism of artifact-producing commands, the experiment grid shape,
//! patient-leakage refusal, and the overlay naming contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fusecad")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn generate_is_deterministic_and_validates_flags() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "generate", "--out", "a", "--count", "12", "--patients", "5",
        "--malignant-fraction", "0.3", "--size", "32", "--seed", "5",
    ];
    assert_ok(&run(dir.path(), &args));
    let mut args_b = args;
    args_b[2] = "b";
    assert_ok(&run(dir.path(), &args_b));
    let manifest_a = std::fs::read(dir.path().join("a/manifest.csv")).unwrap();
    let manifest_b = std::fs::read(dir.path().join("b/manifest.csv")).unwrap();
    assert_eq!(manifest_a, manifest_b, "same flags and seed must give identical manifests");
    let img_a = std::fs::read(dir.path().join("a/images/p0000_i0.pgm")).unwrap();
    let img_b = std::fs::read(dir.path().join("b/images/p0000_i0.pgm")).unwrap();
    assert_eq!(img_a, img_b);

    // Validation failures exit 2.
    let bad = run(
        dir.path(),
        &["generate", "--out", "c", "--count", "0", "--patients", "5"],
    );
    assert_eq!(code(&bad), 2);
    // Unknown flags are clap usage errors, also 2.
    let unknown = run(dir.path(), &["generate", "--nope"]);
    assert_eq!(code(&unknown), 2);
}

#[test]
fn featurize_writes_cache_files() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run(
        dir.path(),
        &["generate", "--out", "d", "--count", "6", "--patients", "4", "--size", "32", "--seed", "3"],
    ));
    assert_ok(&run(
        dir.path(),
        &["featurize", "--manifest", "d/manifest.csv", "--out", "cache"],
    ));
    let entries: Vec<String> = std::fs::read_dir(dir.path().join("cache"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(entries.iter().any(|n| n.ends_with(".fusion.fct")));
    assert!(entries.iter().any(|n| n.ends_with(".lbp.pgm")));
    assert!(entries.iter().any(|n| n.ends_with(".dwt.pgm")));
    // 6 images x 3 artifacts + run_config.json
    assert_eq!(entries.len(), 19);
}

/// Builds a small consult + student bundle; shared by the bundle tests.
fn build_small_bundle(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = dir.join("data");
    let data2 = dir.join("data2");
    assert_ok(&run(
        dir,
        &["generate", "--out", "data", "--count", "28", "--patients", "9",
          "--malignant-fraction", "0.35", "--size", "32", "--seed", "21"],
    ));
    assert_ok(&run(
        dir,
        &["generate", "--out", "data2", "--count", "24", "--patients", "8",
          "--malignant-fraction", "0.35", "--size", "32", "--seed", "22"],
    ));
    assert_ok(&run(
        dir,
        &["pretrain", "--families", "plain_shallow,residual", "--input-mode", "fused",
          "--resolution", "16", "--proxy-images", "60", "--out", "pre",
          "--epochs", "6", "--patience", "5", "--batch-size", "16",
          "--learning-rate", "0.01", "--seed", "23"],
    ));
    assert_ok(&run(
        dir,
        &["consult", "--pretrained-dir", "pre", "--manifest", "data/manifest.csv",
          "--size", "2", "--freeze", "0.25", "--input-mode", "fused",
          "--resolution", "16", "--head-sizes", "8,4", "--out", "ec",
          "--epochs", "5", "--patience", "4", "--batch-size", "8",
          "--learning-rate", "0.01", "--seed", "24"],
    ));
    assert_ok(&run(
        dir,
        &["kdl", "--consult-bundle", "ec", "--train-manifest", "data2/manifest.csv",
          "--cue-join", "features", "--feature-width", "8", "--out", "kdl",
          "--epochs", "5", "--patience", "4", "--batch-size", "8",
          "--learning-rate", "0.01", "--seed", "25"],
    ));
    (data, data2, dir.join("kdl"))
}

#[test]
fn bundle_chain_leakage_refusal_and_explain_naming() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _data2, kdl) = build_small_bundle(dir.path());

    // Training a student on the same patients the consult saw is refused...
    let leaky = run(
        dir.path(),
        &["kdl", "--consult-bundle", "ec", "--train-manifest", "data/manifest.csv",
          "--cue-join", "features", "--out", "kdl_leak",
          "--epochs", "3", "--patience", "2", "--seed", "26"],
    );
    assert_eq!(code(&leaky), 2);
    assert!(
        String::from_utf8_lossy(&leaky.stderr).contains("patient"),
        "stderr: {}",
        String::from_utf8_lossy(&leaky.stderr)
    );
    // ...unless explicitly allowed.
    let allowed = run(
        dir.path(),
        &["kdl", "--consult-bundle", "ec", "--train-manifest", "data/manifest.csv",
          "--cue-join", "features", "--feature-width", "8", "--out", "kdl_biased",
          "--allow-patient-overlap", "--epochs", "3", "--patience", "2",
          "--batch-size", "8", "--seed", "26"],
    );
    assert_ok(&allowed);

    // Overlay naming contract: <stem>_<mode>_<class>.ppm, one per image.
    let img_dir = data.join("images");
    let imgs: Vec<String> = std::fs::read_dir(&img_dir)
        .unwrap()
        .take(2)
        .map(|e| e.unwrap().path().to_string_lossy().into_owned())
        .collect();
    let out = run(
        dir.path(),
        &["explain", "--bundles", kdl.to_str().unwrap(), "--images", &imgs.join(","),
          "--modes", "fused", "--alpha", "0.5", "--out", "overlays"],
    );
    assert_ok(&out);
    let names: Vec<String> = std::fs::read_dir(dir.path().join("overlays"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    assert_eq!(names.len(), 2);
    for name in &names {
        assert!(
            name.contains("_fused_malignant") || name.contains("_fused_benign"),
            "unexpected overlay name {name}"
        );
    }

    // Missing bundle path is a usage error.
    let missing = run(
        dir.path(),
        &["explain", "--bundles", "nowhere", "--images", &imgs[0], "--modes", "fused",
          "--out", "x"],
    );
    assert_eq!(code(&missing), 2);

    // Per-mode bundles: images x modes overlays.
    assert_ok(&run(
        dir.path(),
        &["pretrain", "--families", "plain_shallow,residual", "--input-mode", "raw",
          "--resolution", "16", "--proxy-images", "60", "--out", "pre_raw",
          "--epochs", "5", "--patience", "4", "--batch-size", "16",
          "--learning-rate", "0.01", "--seed", "27"],
    ));
    assert_ok(&run(
        dir.path(),
        &["consult", "--pretrained-dir", "pre_raw", "--manifest", "data/manifest.csv",
          "--size", "2", "--freeze", "0.25", "--input-mode", "raw",
          "--resolution", "16", "--head-sizes", "8,4", "--out", "ec_raw",
          "--epochs", "4", "--patience", "3", "--batch-size", "8",
          "--learning-rate", "0.01", "--seed", "28"],
    ));
    assert_ok(&run(
        dir.path(),
        &["kdl", "--consult-bundle", "ec_raw", "--train-manifest", "data2/manifest.csv",
          "--cue-join", "features", "--feature-width", "8", "--out", "permode/raw",
          "--epochs", "4", "--patience", "3", "--batch-size", "8",
          "--learning-rate", "0.01", "--seed", "29"],
    ));
    std::fs::create_dir_all(dir.path().join("permode")).unwrap();
    let link_target = dir.path().join("permode/fused");
    copy_dir(&kdl, &link_target);
    let multi = run(
        dir.path(),
        &["explain", "--bundles", "permode", "--images", &imgs.join(","),
          "--modes", "raw,fused", "--out", "overlays_multi"],
    );
    assert_ok(&multi);
    let count = std::fs::read_dir(dir.path().join("overlays_multi"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".ppm")
        })
        .count();
    assert_eq!(count, 4, "2 images x 2 modes");
}

fn copy_dir(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let path = entry.unwrap().path();
        let target = dst.join(path.file_name().unwrap());
        if path.is_dir() {
            copy_dir(&path, &target);
        } else {
            std::fs::copy(&path, &target).unwrap();
        }
    }
}

#[test]
fn experiment_grid_produces_the_table_one_cell_layout() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run(
        dir.path(),
        &["generate", "--out", "g", "--count", "60", "--patients", "20",
          "--malignant-fraction", "0.3", "--size", "32", "--seed", "31"],
    ));
    assert_ok(&run(
        dir.path(),
        &["experiment", "grid", "--manifest", "g/manifest.csv",
          "--families", "plain_shallow", "--inputs", "raw,augmented,fused",
          "--freeze", "0,0.25,0.5,0.75", "--repetitions", "1",
          "--resolution", "16", "--proxy-images", "48", "--out", "grid",
          "--epochs", "3", "--patience", "2", "--batch-size", "8", "--seed", "32"],
    ));
    let reports: Vec<String> = std::fs::read_dir(dir.path().join("grid"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".report.json"))
        .collect();
    // 3 input modes x 4 freeze fractions for the one family.
    assert_eq!(reports.len(), 12, "reports: {reports:?}");
    assert!(dir.path().join("grid/table.txt").is_file());
    assert!(dir.path().join("grid/split_plan.json").is_file());

    // The report command re-renders the JSON reports.
    let report = run(dir.path(), &["report", "--inputs", "grid"]);
    assert_ok(&report);
    let table = String::from_utf8_lossy(&report.stdout);
    assert!(table.contains("plain_shallow-fused-f25"), "table:\n{table}");
}

#[test]
fn experiment_kdl_is_deterministic_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run(
        dir.path(),
        &["generate", "--out", "k", "--count", "60", "--patients", "20",
          "--malignant-fraction", "0.3", "--size", "32", "--seed", "41"],
    ));
    let args = |out: &'static str| {
        vec![
            "experiment", "kdl", "--train-manifest", "k/manifest.csv",
            "--consult-size", "2", "--cue-join", "features", "--feature-width", "8",
            "--freeze", "0.25", "--input-mode", "fused", "--repetitions", "2",
            "--resolution", "16", "--proxy-images", "48", "--head-sizes", "8,4",
            "--out", out, "--epochs", "3", "--patience", "2", "--batch-size", "8",
            "--seed", "42",
        ]
    };
    assert_ok(&run(dir.path(), &args("r1")));
    assert_ok(&run(dir.path(), &args("r2")));
    for name in [
        "kdl-ec-2.report.csv",
        "kdl-ec-2.report.json",
        "split_plan.json",
        "rep00_curve.csv",
        "rep01_curve.csv",
        "table.txt",
    ] {
        let a = std::fs::read(dir.path().join("r1").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("r2").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}
