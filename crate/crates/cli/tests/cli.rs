use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defectloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run defectloc")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(dir.path(), &["gen", "--n", "many"]).status.code(), Some(1));
    assert_eq!(bin(dir.path(), &["train"]).status.code(), Some(1));
    assert_eq!(bin(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(bin(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn gen_splits_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let first = bin(dir.path(), &["gen", "--n", "50", "--out", "data"]);
    assert_eq!(first.status.code(), Some(0), "{}", text(&first));
    let out = text(&first);
    let images = out.lines().find(|l| l.starts_with("Images")).unwrap();
    assert_eq!(images.split_whitespace().collect::<Vec<_>>(), ["Images", "40", "10", "50"]);

    let again = bin(dir.path(), &["gen", "--n", "50", "--out", "data"]);
    assert_eq!(again.status.code(), Some(0));
    assert!(text(&again).contains("dataset exists, identical config"));

    let conflict = bin(dir.path(), &["gen", "--n", "50", "--seed", "3", "--out", "data"]);
    assert_eq!(conflict.status.code(), Some(2));
    assert!(text(&conflict).contains("seed: 0 -> 3"), "{}", text(&conflict));

    let bad_profile = bin(dir.path(), &["gen", "--profile", "tiny", "--out", "other"]);
    assert_eq!(bad_profile.status.code(), Some(2));
}

#[test]
fn oracle_eval_traces_and_render() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bin(dir.path(), &["gen", "--n", "40", "--out", "data"]).status.success());
    let eval = bin(
        dir.path(),
        &["eval", "run", "--oracle", "--test", "data/manifest_test.json", "--max-detections", "1"],
    );
    assert_eq!(eval.status.code(), Some(0), "{}", text(&eval));
    assert!(text(&eval).contains("All (mAP)"));
    let report = json(&dir.path().join("run/eval/report.json"));
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    let preds = json(&dir.path().join("run/eval/predictions.json"));
    for img in preds["images"].as_array().unwrap() {
        assert!(img["detections"].as_array().unwrap().len() <= 1);
    }
    assert!(dir.path().join("run/eval/report.md").exists());

    let trace = std::fs::read_dir(dir.path().join("run/traces")).unwrap().next().unwrap().unwrap().path();
    let file = json(&trace)["file"].as_str().unwrap().to_string();
    let image = dir.path().join("data").join(&file);
    let render = bin(
        dir.path(),
        &["render", trace.to_str().unwrap(), "--image", image.to_str().unwrap()],
    );
    assert_eq!(render.status.code(), Some(0), "{}", text(&render));
    let svg_path = dir.path().join("run/renders").join(trace.file_stem().unwrap()).with_extension("svg");
    let svg = std::fs::read_to_string(svg_path).unwrap();
    assert!(svg.contains(r#"class="panel""#));

    let wrong = bin(dir.path(), &["render", trace.to_str().unwrap(), "--image", "data/gen_config.json"]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bin(dir.path(), &["gen", "--n", "20", "--out", "data"]).status.success());
    let args = [
        "train", "run", "--train", "data/manifest_train.json", "--test", "data/manifest_test.json",
        "--extractor", "raw28", "--epochs", "2", "--hidden", "8", "--batch-size", "8",
    ];
    let train = bin(dir.path(), &args);
    assert_eq!(train.status.code(), Some(0), "{}", text(&train));
    let run = dir.path().join("run");
    let cfg = json(&run.join("config.json"));
    assert_eq!(cfg["train"]["epochs"], 2);
    assert_eq!(cfg["extractor"]["name"], "raw28");
    assert_eq!(cfg["extractor_metadata"]["dim"], 784);
    assert!(cfg["tool_version"].is_string());
    assert_eq!(std::fs::read_to_string(run.join("checkpoints/latest")).unwrap().trim(), "epoch_001.ckpt");
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    // a second fresh train into the same directory is refused
    assert_eq!(bin(dir.path(), &args).status.code(), Some(2));

    // rewind to the first epoch and resume: epoch 1 reruns with its scheduled epsilon
    std::fs::write(run.join("checkpoints/latest"), "epoch_000.ckpt\n").unwrap();
    let resume = bin(dir.path(), &["train", "run", "--resume"]);
    assert_eq!(resume.status.code(), Some(0), "{}", text(&resume));
    let lines: Vec<Value> = std::fs::read_to_string(run.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 1);
    assert!((lines[1]["epsilon"].as_f64().unwrap() - 0.82).abs() < 1e-12);
    assert_eq!(lines[1]["total_episodes"], lines[0]["total_episodes"].as_u64().unwrap() * 2);

    let eval = bin(dir.path(), &["eval", "run", "--no-traces"]);
    assert_eq!(eval.status.code(), Some(0), "{}", text(&eval));
    assert!(!run.join("traces").exists());
}

#[test]
fn diverging_training_exits_2_with_context() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bin(dir.path(), &["gen", "--n", "20", "--out", "data"]).status.success());
    let out = bin(
        dir.path(),
        &[
            "train", "run", "--train", "data/manifest_train.json", "--extractor", "raw28", "--epochs", "3",
            "--hidden", "8", "--batch-size", "8", "--lr", "1e300",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let msg = text(&out);
    assert!(msg.contains("non-finite loss") && msg.contains("epoch"), "{msg}");
}

#[test]
fn bench_records_failed_cells() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bin(dir.path(), &["gen", "--n", "20", "--out", "data"]).status.success());
    let matrix = serde_json::json!({
        "train_manifest": "data/manifest_train.json",
        "test_manifest": "data/manifest_test.json",
        "extractors": [{"name": "raw28"}, {"name": "randconv"}, {"name": "external", "params": {"command": "/nonexistent/provider"}}],
        "seeds": [0],
        "train": {"epochs": 1, "hidden": [8], "batch_size": 8}
    });
    std::fs::write(dir.path().join("matrix.json"), matrix.to_string()).unwrap();
    let out = bin(dir.path(), &["bench", "matrix.json", "--out", "bench"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let report = json(&dir.path().join("bench/report.json"));
    assert_eq!(report["cells"].as_array().unwrap().len(), 3);
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    let failed: Vec<&Value> = report["cells"].as_array().unwrap().iter().filter(|c| !c["error"].is_null()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0]["extractor"], "external");
    assert_eq!(report["reference_rho"], -0.5);
    let md = std::fs::read_to_string(dir.path().join("bench/report.md")).unwrap();
    assert!(md.contains("Failed cells") && md.contains("-0.50"));

    let dup = serde_json::json!({"extractors": [{"name": "hog"}, {"name": "hog"}]});
    std::fs::write(dir.path().join("dup.json"), dup.to_string()).unwrap();
    assert_eq!(bin(dir.path(), &["bench", "dup.json"]).status.code(), Some(2));
}
