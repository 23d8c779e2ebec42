use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fusionkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionkit"))
        .args(args)
        .output()
        .expect("spawn fusionkit")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn missing_scene_fails_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fusionkit(&[
        "run",
        "--strategy",
        "single",
        "--scene",
        p(&tmp.path().join("nope")),
        "--out",
        p(&tmp.path().join("out")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: "));
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn bad_dims_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fusionkit(&[
        "grad-check",
        "--dims",
        "4,3",
        "--out",
        p(&tmp.path().join("g.csv")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn run_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"num_points": 400}"#).unwrap();
    let scene = tmp.path().join("scene");
    assert!(
        fusionkit(&["gen-scene", "--spec", p(&spec), "--out", p(&scene)])
            .status
            .success()
    );
    for name in [
        "points.pclf",
        "camera.json",
        "features.fmap",
        "correspondences.csv",
    ] {
        assert!(scene.join(name).exists(), "{name}");
    }

    let cfg = tmp.path().join("fusion.json");
    fs::write(&cfg, r#"{"lidar_encoder": {"hidden": [8], "seed": 1}}"#).unwrap();
    let out_dir = tmp.path().join("out");
    let out = fusionkit(&[
        "run",
        "--strategy",
        "late",
        "--scene",
        p(&scene),
        "--config",
        p(&cfg),
        "--out",
        p(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["strategy"], "late");
    assert_eq!(metrics["input_points"], 400);
    let record: serde_json::Value =
        serde_json::from_slice(&fs::read(out_dir.join("record.json")).unwrap()).unwrap();
    assert!(record.is_array());
    assert!(out_dir.join("pseudo_image.fmap").exists());
}

#[test]
fn seed_changes_generated_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(fusionkit(&["--seed", "1", "gen-scene", "--out", p(&a)])
        .status
        .success());
    assert!(fusionkit(&["--seed", "2", "gen-scene", "--out", p(&b)])
        .status
        .success());
    assert_ne!(
        fs::read(a.join("points.pclf")).unwrap(),
        fs::read(b.join("points.pclf")).unwrap()
    );
}

#[test]
fn zero_corruption_keeps_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let copy = tmp.path().join("copy");
    assert!(fusionkit(&["gen-scene", "--out", p(&scene)])
        .status
        .success());
    assert!(
        fusionkit(&["corrupt", "--scene", p(&scene), "--out", p(&copy)])
            .status
            .success()
    );
    for name in ["points.pclf", "features.fmap", "camera.json"] {
        assert_eq!(
            fs::read(scene.join(name)).unwrap(),
            fs::read(copy.join(name)).unwrap()
        );
    }
}
