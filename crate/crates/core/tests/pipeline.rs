//! End-to-end CLI workflow on a small phantom cohort: generate, preprocess,
//! train (region and whole-volume), predict both ways, evaluate, compare.

use regionseg::metrics::dsc;
use regionseg::nifti::read_label_map;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regionseg"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("command launches");
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        cmd.get_args().collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_train_config(path: &Path, dataset_dir: &Path, subjects: &[&str]) {
    let pairs: Vec<String> = subjects
        .iter()
        .map(|s| {
            format!(
                r#"{{"image": "{}", "labels": "{}"}}"#,
                dataset_dir.join(format!("{s}_norm.nii")).display(),
                dataset_dir.join(format!("{s}_labels.nii")).display()
            )
        })
        .collect();
    let config = format!(
        r#"{{
  "schedule": {{
    "pretrain_epochs": 1,
    "train_epochs": 2,
    "batch_size": 2,
    "lr": 0.01,
    "momentum": 0.9,
    "seed": 0
  }},
  "channels": [4, 8],
  "patch_shape": [32, 32, 32],
  "patch_stride": [16, 16, 16],
  "dataset": [{}]
}}"#,
        pairs.join(",")
    );
    std::fs::write(path, config).unwrap();
}

#[test]
fn cli_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let subjects = ["phantom000", "phantom001", "phantom002"];

    // Generate a small cohort.
    run_ok(bin()
        .args(["phantom", "--count", "3", "--seed", "5"])
        .arg("--out")
        .arg(&data));
    assert!(data.join("phantom000_image.nii").exists());
    assert!(data.join("phantom.manifest.json").exists());

    // Preprocess each subject.
    for s in &subjects {
        let out = run_ok(bin()
            .arg("preprocess")
            .arg("--input")
            .arg(data.join(format!("{s}_image.nii")))
            .arg("--mask")
            .arg(data.join(format!("{s}_mask.nii")))
            .arg("--output")
            .arg(data.join(format!("{s}_norm.nii"))));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("scale factor"), "{stdout}");
    }

    // Train one region model and the whole-volume patch model.
    let config = dir.path().join("train.json");
    write_train_config(&config, &data, &subjects);
    let ckpts = dir.path().join("ckpts");
    for target in ["brainstem", "ventricles", "striatum", "whole"] {
        run_ok(bin()
            .args(["train", "--region", target, "--seed", "3"])
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&ckpts));
    }
    // History CSV has one row per epoch across both phases.
    let history = std::fs::read_to_string(ckpts.join("brainstem_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 1 + 2, "header + pretrain + train");

    // Determinism: retraining with the same seed gives byte-identical
    // checkpoints.
    let ckpts2 = dir.path().join("ckpts2");
    run_ok(bin()
        .args(["train", "--region", "brainstem", "--seed", "3"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&ckpts2));
    let a = std::fs::read(ckpts.join("brainstem.ckpt")).unwrap();
    let b = std::fs::read(ckpts2.join("brainstem.ckpt")).unwrap();
    assert_eq!(a, b, "checkpoints differ across identical reruns");

    // Predict the first subject with both modes.
    let preds_region = dir.path().join("preds_region");
    let preds_patch = dir.path().join("preds_patch");
    std::fs::create_dir_all(&preds_region).unwrap();
    std::fs::create_dir_all(&preds_patch).unwrap();
    let target_name = "phantom000_labels.nii";
    let out = run_ok(bin()
        .args(["predict", "--mode", "region"])
        .arg("--checkpoints")
        .arg(&ckpts)
        .arg("--input")
        .arg(data.join("phantom000_norm.nii"))
        .arg("--output")
        .arg(preds_region.join(target_name)));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("region brainstem"), "{stdout}");

    let out = run_ok(bin()
        .args(["predict", "--mode", "patch"])
        .args(["--patch-shape", "32,32,32", "--stride", "16,16,16"])
        .arg("--checkpoints")
        .arg(&ckpts)
        .arg("--input")
        .arg(data.join("phantom000_norm.nii"))
        .arg("--output")
        .arg(preds_patch.join(target_name)));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("27 patches"), "{stdout}");

    // Both predictions stay within the palette.
    for d in [&preds_region, &preds_patch] {
        let lm = read_label_map(&d.join(target_name)).unwrap();
        assert!(lm.labels().iter().all(|&l| l <= 12));
    }

    // Self-evaluation: truth against truth is perfect.
    let truth_only = dir.path().join("truth");
    std::fs::create_dir_all(&truth_only).unwrap();
    std::fs::copy(
        data.join("phantom000_labels.nii"),
        truth_only.join(target_name),
    )
    .unwrap();
    let eval_self = dir.path().join("eval_self");
    let out = run_ok(bin()
        .arg("evaluate")
        .arg("--pred")
        .arg(&truth_only)
        .arg("--truth")
        .arg(&truth_only)
        .arg("--out")
        .arg(&eval_self));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1.000±0.000"), "{stdout}");
    let summary = std::fs::read_to_string(eval_self.join("summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.contains("1.000000")), "{summary}");

    // Paired evaluation of the two prediction modes.
    let eval_cmp = dir.path().join("eval_cmp");
    let out = run_ok(bin()
        .arg("evaluate")
        .arg("--pred")
        .arg(&preds_region)
        .arg("--truth")
        .arg(&data_as_truth(&data, target_name, dir.path()))
        .arg("--compare")
        .arg(&preds_patch)
        .arg("--out")
        .arg(&eval_cmp));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("Wilcoxon") || stdout.contains("identical"),
        "{stdout}"
    );
    assert!(eval_cmp.join("records.csv").exists());

    // Library cross-check: the evaluation operates on real files.
    let pred = read_label_map(&preds_region.join(target_name)).unwrap();
    let truth = read_label_map(&data.join("phantom000_labels.nii")).unwrap();
    for label in 1..=12u8 {
        let d = dsc(&pred, &truth, label).unwrap();
        assert!((0.0..=1.0).contains(&d));
    }
}

/// Stage the matching truth file under the prediction's filename.
fn data_as_truth(data: &Path, name: &str, scratch: &Path) -> std::path::PathBuf {
    let dir = scratch.join("truth_stage");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::copy(data.join("phantom000_labels.nii"), dir.join(name)).unwrap();
    dir
}

#[test]
fn missing_input_exits_with_code_2() {
    let out = bin()
        .args(["preprocess", "--input", "/nonexistent.nii", "--output", "/tmp/x.nii"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().args(["train", "--region", "brainstem"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "missing required flags");
}

#[test]
fn evaluate_rejects_unmatched_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let truth = dir.path().join("truth");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&truth).unwrap();
    // A prediction with no matching truth file.
    let lm = regionseg::LabelMap::zeros([2, 2, 2], [1.0; 3], [0.0; 3]);
    regionseg::nifti::write_label_map(&lm, &pred.join("subjectA.nii")).unwrap();
    regionseg::nifti::write_label_map(&lm, &truth.join("subjectB.nii")).unwrap();
    let out = bin()
        .arg("evaluate")
        .arg("--pred")
        .arg(&pred)
        .arg("--truth")
        .arg(&truth)
        .arg("--out")
        .arg(dir.path().join("eval"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
