use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lfcbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfcbm"))
        .args(args)
        .env("LFCBM_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lfcbm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn staged_commands_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = ok(&["synth", "--out", p(&data), "--seed", "3", "--preset", "small"]);
    let manifest = manifest.trim();
    assert!(Path::new(manifest).is_file());

    let kept = tmp.path().join("kept.txt");
    let report = tmp.path().join("filter.json");
    let out = ok(&["filter-concepts", "--manifest", manifest, "--out", p(&kept), "--report", p(&report)]);
    assert!(out.contains("filter 4:"), "{out}");
    let kept_lines = std::fs::read_to_string(&kept).unwrap().lines().count();
    let rep: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(rep["report"]["final_count"], kept_lines);

    let cbl = tmp.path().join("cbl");
    let train = tmp.path().join("train.json");
    ok(&["train-cbl", "--manifest", manifest, "--concepts", p(&kept), "--out", p(&cbl), "--report", p(&train)]);
    for f in ["W_c.npy", "stats.npy", "concepts.txt", "fidelity.json"] {
        assert!(cbl.join(f).is_file(), "{f}");
    }

    let head = tmp.path().join("head");
    let path = tmp.path().join("path.json");
    let eval = json(&[
        "train-final", "--cbl", p(&cbl), "--manifest", manifest, "--alpha", "0.99", "--nnz", "2:6", "--steps", "20",
        "--out", p(&head), "--path-report", p(&path),
    ]);
    assert!(eval["val_accuracy"].as_f64().unwrap() > 0.8, "{eval}");
    assert!(path.is_file());
    let again = json(&["evaluate", "--cbl", p(&cbl), "--head", p(&head), "--manifest", manifest]);
    assert_eq!(again["val_accuracy"], eval["val_accuracy"]);

    let dense = tmp.path().join("dense");
    let d = json(&["train-final", "--cbl", p(&cbl), "--manifest", manifest, "--lambda", "0", "--out", p(&dense)]);
    assert_eq!(d["mean_nnz"].as_f64().unwrap(), d["concepts"].as_f64().unwrap());
}

#[test]
fn model_directory_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = ok(&["synth", "--out", p(&tmp.path().join("data")), "--preset", "small"]);
    let model = tmp.path().join("model");
    let report = json(&["run", "--manifest", manifest.trim(), "--out", p(&model), "--nnz", "2:6", "--steps", "20"]);
    assert!(report["val_accuracy"].as_f64().unwrap() > 0.8);
    let eval = json(&["evaluate", "--model-dir", p(&model)]);
    assert_eq!(eval["val_accuracy"], report["val_accuracy"]);

    let text = ok(&["explain", "--model-dir", p(&model), "--input-index", "0", "--k", "3"]);
    assert!(text.contains("input 0: predicted"), "{text}");
    let view = json(&["explain", "--model-dir", p(&model), "--input-index", "0", "--k", "3", "--json"]);
    assert!(view["entries"].as_array().unwrap().len() <= 3);

    let graph = tmp.path().join("graph.json");
    ok(&["weights-graph", "--model-dir", p(&model), "--classes", "class_0,class_2", "--min-weight", "0.05", "--out", p(&graph)]);
    let g: Value = serde_json::from_slice(&std::fs::read(&graph).unwrap()).unwrap();
    assert!(g["edges"].as_array().unwrap().iter().all(|e| e["class"] == 0 || e["class"] == 2));

    let dir = p(&model);
    let class = view["class"].as_u64().unwrap();
    let other = ((class + 1) % 4).to_string();
    let class = class.to_string();
    let concept = view["entries"][0]["name"].as_str().unwrap().to_string();
    let edit = ["--input", "0", "--gt", other.as_str(), "--pred", class.as_str(), "--concept", concept.as_str(), "--b", "0.5"];
    let dw: f64 = ok(&[&["edit", "--model-dir", dir, "propose"][..], &edit].concat()).trim().parse().unwrap();
    assert!(dw.is_finite());
    assert!(json(&["edit", "--model-dir", dir, "list"]).as_array().unwrap().is_empty());
    let rec = json(&[&["edit", "--model-dir", dir, "apply"][..], &edit].concat());
    assert_eq!(rec["delta_w"].as_f64().unwrap(), dw);
    let after = json(&["explain", "--model-dir", dir, "--input-index", "0", "--json"]);
    assert_eq!(after["class"].as_u64().unwrap().to_string(), other);

    let impact = json(&["edit", "--model-dir", dir, "impact", "--val"]);
    let n = impact["n_val"].as_f64().unwrap();
    let identity = (impact["fixed"].as_f64().unwrap() - impact["broken"].as_f64().unwrap()) / n;
    assert_eq!(impact["delta_accuracy"].as_f64().unwrap(), identity);

    let id = rec["id"].to_string();
    let reverted = json(&["edit", "--model-dir", dir, "revert", "--id", &id]);
    assert_eq!(reverted["status"], "reverted");
    assert!(!lfcbm(&["edit", "--model-dir", dir, "revert", "--id", &id]).status.success());
    let restored = json(&["explain", "--model-dir", dir, "--input-index", "0", "--json"]);
    assert_eq!(restored["logit"], view["logit"]);

    let tag = json(&["edit", "--model-dir", dir, "tag", "--input", "0", "--type", "3", "--note", "spurious"]);
    assert_eq!(tag["type"], 3);
    assert!(!lfcbm(&["edit", "--model-dir", dir, "tag", "--input", "0", "--type", "7"]).status.success());
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lfcbm(&["run", "--manifest", p(&tmp.path().join("missing.json")), "--out", p(&tmp.path().join("m"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage 0"));
    assert!(!tmp.path().join("m").exists());
    assert!(!lfcbm(&["synth", "--out", p(tmp.path()), "--preset", "huge"]).status.success());
    assert!(!lfcbm(&["train-final", "--cbl", "x", "--manifest", "y", "--out", "z", "--nnz", "9:3"]).status.success());
    let bad = Command::new(env!("CARGO_BIN_EXE_lfcbm"))
        .args(["synth", "--out", p(&tmp.path().join("d"))])
        .env("LFCBM_THREADS", "many")
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("LFCBM_THREADS"));
}
