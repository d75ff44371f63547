mod common;

use std::path::Path;
use std::process::{Command, Output};

use partsdf::model::Variant;
use serde_json::Value;

fn hub(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partsdf-hub")).args(args).output().unwrap()
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.is_file())
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&f).unwrap()))
        .collect();
    out.sort();
    out
}

fn gen(out: &Path, seed: &str) -> Value {
    ok_json(hub(&[
        "gen", "--count", "3", "--test-count", "1", "--samples", "500", "--cloud-points", "100", "--seed", seed, "--out", p(out),
    ]))
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let v = gen(&a, "5");
    assert_eq!(v["train"], 3);
    assert_eq!(v["test"], 1);
    gen(&b, "5");
    gen(&c, "6");
    let (da, db) = (dir_bytes(&a), dir_bytes(&b));
    assert!(!da.is_empty());
    assert_eq!(da, db);
    assert_ne!(da, dir_bytes(&c));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");

    let out = hub(&["gen", "--out", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));

    let out = hub(&["--json", "train", "--data", p(&missing), "--out", p(&tmp.path().join("m")), "--ablate", "Lxx"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");
    assert_eq!(err["exit_code"], 2);

    let out = hub(&["--json", "train", "--data", p(&missing), "--out", p(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");

    std::fs::write(tmp.path().join("model.json"), "{}").unwrap();
    let out = hub(&["eval", "--model", p(&tmp.path().join("model.json")), "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(3));

    let out = hub(&["gen", "--count", "2", "--labeled-fraction", "2.0", "--out", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn manipulated_tube_is_detected_by_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let (data_dir, model_dir) = (tmp.path().join("data"), tmp.path().join("model"));
    let dc = common::dataset_config(11);
    partsdf::shapegen::write_dataset(&data_dir, &partsdf::shapegen::generate_dataset(&dc).unwrap()).unwrap();
    let cfg_path = tmp.path().join("train.json");
    let cfg = common::train_config(Variant::Disentangled, 60);
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let v = ok_json(hub(&["train", "--data", p(&data_dir), "--config", p(&cfg_path), "--out", p(&model_dir)]));
    assert_eq!(v["epochs"], 60);
    let model_path = model_dir.join("model.json");
    assert!(model_dir.join("metrics.csv").exists());

    let model = partsdf::model::ModelBundle::load(&model_path).unwrap();
    let id = model.shapes[0].id.clone();
    let names = model.layout.param_names();
    let vals = model.layout.explicit_vector(&model.shapes[0].params);
    let at = |n: &str| vals[names.iter().position(|x| x == n).unwrap()];
    let radius = at("tube.outer_radius") * 1.05;

    let obj = tmp.path().join("edit/shape.obj");
    let set = format!("tube.outer_radius={radius}");
    let edited = ok_json(hub(&["manipulate", "--model", p(&model_path), "--shape-id", &id, "--set", &set, "--resolution", "32", "--out", p(&obj)]));
    assert!((edited["tube.outer_radius"].as_f64().unwrap() - radius).abs() < 1e-12);
    assert!(std::fs::read_to_string(&obj).unwrap().lines().any(|l| l.starts_with("f ")));

    let det = ok_json(hub(&["eval", "--model", p(&model_path), "--params", p(&obj.with_extension("json"))]));
    let bin = partsdf::eval::hough_bin_width();
    assert!((det["radius"].as_f64().unwrap() - radius).abs() <= bin, "{det}");
    assert!((det["thickness"].as_f64().unwrap() - at("tube.thickness")).abs() <= bin, "{det}");

    let out = hub(&["manipulate", "--model", p(&model_path), "--shape-id", &id, "--set", "tube.nothing=1", "--out", p(&obj)]);
    assert_eq!(out.status.code(), Some(2));
    let out = hub(&["manipulate", "--model", p(&model_path), "--shape-id", &id, "--target", "tube.thickness=0.1", "--out", p(&obj)]);
    assert_eq!(out.status.code(), Some(2));
}
