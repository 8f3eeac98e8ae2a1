//! Integration tests for the command-line driver: artifact layout, exit
//! codes, and determinism of the produced files.

use sdtn::cli::run_from;
use sdtn::data::{write_npy_f64, write_npy_u16};
use std::path::Path;

/// Rank-1 cube [8, 8, 6] with strictly positive separable structure, so any
/// extracted patch is well approximated at low bond rank.
fn write_separable_cube(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let (h, w, b) = (8usize, 8, 6);
    let mut data = vec![0.0f64; h * w * b];
    for r in 0..h {
        for c in 0..w {
            for band in 0..b {
                data[(r * w + c) * b + band] =
                    (1.0 + 0.3 * r as f64) * (1.0 + 0.2 * c as f64) * (0.5 + 0.1 * band as f64);
            }
        }
    }
    let cube = dir.join("cube.npy");
    let labels = dir.join("labels.npy");
    write_npy_f64(&cube, &[h, w, b], &data).unwrap();
    write_npy_u16(&labels, &[h, w], &vec![1u16; h * w]).unwrap();
    (cube, labels)
}

/// Two-class scene [8, 8, 4]: left half peaks in band 0, right half in
/// band 1, with a small deterministic ripple.
fn write_two_class_scene(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let (h, w, b) = (8usize, 8, 4);
    let mut data = vec![0.0f64; h * w * b];
    let mut labels = vec![0u16; h * w];
    for r in 0..h {
        for c in 0..w {
            let class = if c < w / 2 { 1u16 } else { 2 };
            labels[r * w + c] = class;
            for band in 0..b {
                let base = if band == (class - 1) as usize { 1.0 } else { 0.1 };
                data[(r * w + c) * b + band] =
                    base + 0.01 * ((r * 31 + c * 17 + band * 7) % 10) as f64;
            }
        }
    }
    let cube = dir.join("cube.npy");
    let labels_path = dir.join("labels.npy");
    write_npy_f64(&cube, &[h, w, b], &data).unwrap();
    write_npy_u16(&labels_path, &[h, w], &labels).unwrap();
    (cube, labels_path)
}

fn write_config(dir: &Path, name: &str, value: &serde_json::Value) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path
}

fn train_config(cube: &Path, labels: &Path, out: &Path) -> serde_json::Value {
    serde_json::json!({
        "cube": cube,
        "labels": labels,
        "mode": "sdtn-only",
        "n_per_class": 3,
        "seed": 11,
        "output_dir": out,
        "patch_size": 3,
        "train_iters": 40,
        "infer_iters": 5,
        "hyperparams": {
            "lr0": 0.05,
            "backtracking": true,
            "max_iters": 40,
            "tol": 1e-12
        },
    })
}

fn run(args: &[&str]) -> i32 {
    run_from(std::iter::once("sdtn").chain(args.iter().copied()))
}

#[test]
fn decompose_fits_separable_cube() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_separable_cube(dir.path());
    let out = dir.path().join("out");
    let config = write_config(
        dir.path(),
        "config.json",
        &serde_json::json!({
            "cube": cube,
            "labels": labels,
            "mode": "sdtn-only",
            "n_per_class": 1,
            "seed": 3,
            "output_dir": out,
            "patch_size": 5,
            "fctn_rank": 3,
            "hyperparams": {
                "alpha": 0.0, "beta": 0.0,
                "lambda1": 0.0, "lambda2": 0.0, "lambda3": 0.0,
                "lr0": 0.1, "backtracking": true,
                "max_iters": 6000, "tol": 1e-13
            },
        }),
    );
    assert_eq!(run(&["decompose", "--config", config.to_str().unwrap()]), 0);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("decompose_report.json")).unwrap())
            .unwrap();
    let patches = report["patches"].as_array().unwrap();
    assert_eq!(patches.len(), 1);
    let rel = patches[0]["relative_error"].as_f64().unwrap();
    assert!(rel <= 1e-3, "relative error {rel}");
    assert!(out.join("factors_4_4.arc").exists());
}

#[test]
fn decompose_with_zero_iterations_reports_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_separable_cube(dir.path());
    let out = dir.path().join("out");
    let config = write_config(
        dir.path(),
        "config.json",
        &serde_json::json!({
            "cube": cube,
            "labels": labels,
            "mode": "sdtn-only",
            "n_per_class": 1,
            "seed": 3,
            "output_dir": out,
            "patch_size": 5,
            "hyperparams": {"max_iters": 0, "lr0": 0.1},
        }),
    );
    assert_eq!(run(&["decompose", "--config", config.to_str().unwrap()]), 0);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("decompose_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["patches"][0]["iterations"], 0);
    assert!(report["patches"][0]["loss"]["total"].as_f64().unwrap() > 0.0);
}

#[test]
fn missing_cube_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.json",
        &serde_json::json!({
            "cube": dir.path().join("no_such_cube.npy"),
            "labels": dir.path().join("no_such_labels.npy"),
            "mode": "trn",
            "n_per_class": 1,
            "seed": 3,
            "output_dir": dir.path().join("out"),
        }),
    );
    // in-process: the exit code
    assert_eq!(run(&["decompose", "--config", config.to_str().unwrap()]), 3);
    // subprocess: the diagnostic must name the missing file
    let output = std::process::Command::new(env!("CARGO_BIN_EXE_sdtn"))
        .args(["decompose", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("no_such_cube.npy"),
        "stderr does not name the missing cube: {stderr}"
    );
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_two_class_scene(dir.path());
    let out = dir.path().join("out");
    let mut bad_key = train_config(&cube, &labels, &out);
    bad_key["mystery"] = serde_json::json!(1);
    let path = write_config(dir.path(), "bad_key.json", &bad_key);
    assert_eq!(run(&["train", "--config", path.to_str().unwrap()]), 2);

    let mut bad_mode = train_config(&cube, &labels, &out);
    bad_mode["mode"] = serde_json::json!("psychic");
    let path = write_config(dir.path(), "bad_mode.json", &bad_mode);
    assert_eq!(run(&["train", "--config", path.to_str().unwrap()]), 2);

    let mut even_patch = train_config(&cube, &labels, &out);
    even_patch["patch_size"] = serde_json::json!(4);
    let path = write_config(dir.path(), "even_patch.json", &even_patch);
    assert_eq!(run(&["train", "--config", path.to_str().unwrap()]), 2);

    // unparseable command line
    assert_eq!(run(&["transmogrify"]), 2);
}

#[test]
fn train_then_evaluate_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_two_class_scene(dir.path());
    let out = dir.path().join("out");
    let config = write_config(dir.path(), "config.json", &train_config(&cube, &labels, &out));
    assert_eq!(run(&["train", "--config", config.to_str().unwrap()]), 0);
    for file in ["train_log.jsonl", "checkpoint.ckpt", "train_report.json"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["train_accuracy"], 1.0);
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    for line in log.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(record["total"].as_f64().unwrap().is_finite());
    }

    assert_eq!(run(&["evaluate", "--config", config.to_str().unwrap()]), 0);
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["oa"].as_f64().unwrap() >= 0.9);
    let ppm = std::fs::read(out.join("map.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
    assert_eq!(ppm.len(), 11 + 8 * 8 * 3);
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_two_class_scene(dir.path());
    let out = dir.path().join("out");
    let config = write_config(dir.path(), "config.json", &train_config(&cube, &labels, &out));
    let mut artifacts = Vec::new();
    for run_dir in ["a", "b"] {
        let out_dir = dir.path().join(run_dir);
        assert_eq!(
            run(&[
                "train",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap()
            ]),
            0
        );
        artifacts.push((
            std::fs::read(out_dir.join("train_log.jsonl")).unwrap(),
            std::fs::read(out_dir.join("checkpoint.ckpt")).unwrap(),
        ));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "training logs differ");
    assert_eq!(artifacts[0].1, artifacts[1].1, "checkpoints differ");
}

#[test]
fn evaluate_rejects_checkpoint_from_other_config() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_two_class_scene(dir.path());
    let out = dir.path().join("out");
    let config = write_config(dir.path(), "config.json", &train_config(&cube, &labels, &out));
    assert_eq!(run(&["train", "--config", config.to_str().unwrap()]), 0);
    let mut edited = train_config(&cube, &labels, &out);
    edited["seed"] = serde_json::json!(12);
    let edited_path = write_config(dir.path(), "edited.json", &edited);
    assert_eq!(
        run(&[
            "evaluate",
            "--config",
            edited_path.to_str().unwrap(),
            "--checkpoint",
            out.join("checkpoint.ckpt").to_str().unwrap()
        ]),
        5
    );
}

#[test]
fn divergent_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_two_class_scene(dir.path());
    let out = dir.path().join("out");
    let mut config = train_config(&cube, &labels, &out);
    config["hyperparams"] = serde_json::json!({
        "lr0": 1e6,
        "backtracking": false,
        "max_iters": 200,
        "tol": 1e-12
    });
    let path = write_config(dir.path(), "config.json", &config);
    assert_eq!(run(&["train", "--config", path.to_str().unwrap()]), 4);
}

#[test]
fn gradcheck_passes_and_reports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = write_two_class_scene(dir.path());
    let config = write_config(
        dir.path(),
        "config.json",
        &train_config(&cube, &labels, &dir.path().join("out")),
    );
    let mut reports = Vec::new();
    for run_dir in ["a", "b"] {
        let out_dir = dir.path().join(run_dir);
        assert_eq!(
            run(&[
                "gradcheck",
                "--config",
                config.to_str().unwrap(),
                "--seed",
                "9",
                "--out",
                out_dir.to_str().unwrap()
            ]),
            0
        );
        reports.push(std::fs::read(out_dir.join("gradcheck.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1], "gradcheck reports differ");
    let report: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert!(report["components"].as_array().unwrap().len() >= 18);
}
