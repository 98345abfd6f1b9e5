//! End-to-end CLI drive: train a tiny model, run an attack sweep from a
//! config file, mine the resulting loss matrices, probe gradient cost, and
//! merge reports. Everything runs against the compiled `mos` binary.

use std::path::Path;
use std::process::Command;

fn mos() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mos"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn mos");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn write_config(dir: &Path, model: &Path, out_dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "dataset": {"seed": 11, "train_points": 200, "eval_points": 20, "dim": 2, "classes": 3, "sigma": 0.08},
        "model": {"weights_path": model},
        "attack": {"epsilon": 0.1, "n_iter": 8, "seed": 5},
        "grid": [
            {"kind": "single", "loss": 0, "restarts": 1},
            {"kind": "mos", "k": 3, "losses": [0, 1, 2, 3, 4, 5, 6, 7], "restarts": 1},
            {"kind": "ensemble", "losses": [0, 1], "restarts": 2}
        ],
        "output_dir": out_dir
    });
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bin");
    let dataset = dir.path().join("data.csv");

    // train
    let out = run_ok(
        mos()
            .arg("train")
            .args(["--seed", "11", "--points", "200", "--epochs", "6"])
            .arg("--out")
            .arg(&model)
            .arg("--export-dataset")
            .arg(&dataset),
    );
    assert!(out.contains("clean accuracy"), "{out}");
    assert!(model.exists() && dataset.exists());

    // train again from the exported CSV; must succeed and write a model
    let model2 = dir.path().join("model2.bin");
    run_ok(
        mos()
            .arg("train")
            .args(["--epochs", "2"])
            .arg("--from-dataset")
            .arg(&dataset)
            .arg("--out")
            .arg(&model2),
    );

    // attack
    let results_dir = dir.path().join("results");
    let cfg = write_config(dir.path(), &model, &results_dir);
    let out = run_ok(mos().arg("attack").arg("--config").arg(&cfg));
    assert!(out.contains("MOS-8(3)"), "{out}");
    assert!(results_dir.join("results.csv").exists());
    assert!(results_dir.join("results.json").exists());

    // mine
    let artifact = results_dir.join("loss_matrices/MOS-8_3_.json");
    assert!(artifact.exists());
    let patterns = dir.path().join("patterns.json");
    let out = run_ok(
        mos()
            .arg("mine")
            .arg("--input")
            .arg(&artifact)
            .arg("--out")
            .arg(&patterns)
            .args(["--mu", "0.05"]),
    );
    assert!(out.contains("dominant examples"), "{out}");
    assert!(patterns.exists());

    // probe
    let probe_csv = dir.path().join("probe.csv");
    let out = run_ok(
        mos()
            .arg("probe")
            .arg("--model")
            .arg(&model)
            .args(["--k", "1,2"])
            .arg("--out")
            .arg(&probe_csv),
    );
    assert!(out.contains("ratio"), "{out}");
    let raw = std::fs::read_to_string(&probe_csv).unwrap();
    assert_eq!(raw.lines().count(), 3, "{raw}");

    // report
    let merged = dir.path().join("merged.csv");
    let long = dir.path().join("long.csv");
    run_ok(
        mos()
            .arg("report")
            .arg("--inputs")
            .arg(results_dir.join("results.csv"))
            .arg("--out")
            .arg(&merged)
            .arg("--long")
            .arg(&long),
    );
    assert!(merged.exists() && long.exists());
}

#[test]
fn attack_emits_a_parseable_template() {
    let dir = tempfile::tempdir().unwrap();
    let template = dir.path().join("template.json");
    run_ok(mos().arg("attack").arg("--emit-template").arg(&template));
    let raw = std::fs::read_to_string(&template).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&raw).unwrap();
    assert!(parsed["attack"]["epsilon"].as_f64().unwrap() > 0.0);
    assert!(parsed["grid"].as_array().unwrap().len() >= 2);
}

#[test]
fn bad_config_fails_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let out = mos()
        .arg("attack")
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("parsing experiment config"), "{stderr}");
}
