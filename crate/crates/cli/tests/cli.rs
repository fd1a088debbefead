use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn aspectree(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aspectree"))
        .current_dir(dir)
        .env_remove("BACKEND")
        .env("MOCK_CONCEPT_SPACE", dir.join("fx/concept-space.json"))
        .args(args)
        .output()
        .unwrap()
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let mut all = vec!["--json"];
    all.extend_from_slice(args);
    let out = aspectree(dir, &all);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok_json(dir.path(), &["make-fixture", "fx"]);
    dir
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &[], &["build"], &["sample", "t", "not-a-number"]] {
        let out = aspectree(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("Usage") || err.contains("--help"), "{args:?}: {err}");
    }
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let dir = fixture();
    let cases: [&[&str]; 4] = [
        &["sample", "trees/missing", "1"],
        &["build", "empty-dir-that-does-not-exist"],
        &["--backend", "gpu", "build", "fx"],
        &["build", "fx", "--resume"],
    ];
    for args in cases {
        let out = aspectree(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "), "{args:?}");
    }
}

#[test]
fn builds_a_two_level_tree_from_the_fixture() {
    let dir = fixture();
    let tree = ok_json(dir.path(), &["build", "fx", "--tree-id", "demo", "--max-depth", "2"]);
    let nodes = tree["nodes"].as_array().unwrap();
    assert_eq!(nodes.iter().map(|n| n["depth"].as_u64().unwrap()).max(), Some(2));
    assert_eq!(tree["build_log"][0]["decision"], "split-ok");
    assert!(dir.path().join("trees/demo/manifest.json").is_file());

    // Rebuilding over an archive needs an explicit choice.
    let out = aspectree(dir.path(), &["build", "fx", "--tree-id", "demo"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    // Resuming a finished build changes nothing.
    let resumed = ok_json(dir.path(), &["build", "fx", "--tree-id", "demo", "--resume"]);
    assert_eq!(resumed["nodes"], tree["nodes"]);
}

#[test]
fn score_writes_matrix_and_heatmap() {
    let dir = fixture();
    ok_json(dir.path(), &["build", "fx", "--tree-id", "demo", "--max-depth", "1"]);
    let out = ok_json(dir.path(), &["score", "trees/demo", "--heatmap", "h.png"]);
    let labels = out["matrix"]["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 2);
    let values = out["matrix"]["scores"].as_array().unwrap();
    assert_eq!(values[0][1], values[1][0]);
    let png = image::open(dir.path().join("h.png")).unwrap();
    assert_eq!(png.width(), 81);
}

#[test]
fn sample_split_and_combine() {
    let dir = fixture();
    ok_json(dir.path(), &["build", "fx", "--tree-id", "a", "--max-depth", "1"]);
    ok_json(dir.path(), &["build", "fx", "--tree-id", "b", "--max-depth", "1", "--seeds", "5,6"]);

    let out = ok_json(dir.path(), &["sample", "trees/a", "1", "-n", "3", "--seed", "4", "--out", "s"]);
    assert_eq!(out["prompt"], "A photograph of <a_v1>");
    assert_eq!(out["images"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("s/002.vec").is_file());

    let out = ok_json(
        dir.path(),
        &["combine", "--trees", "trees/a,trees/b", "--tokens", "a_v1,b_v2", "--template", "{} beside {}", "-n", "2", "--out", "c"],
    );
    assert_eq!(out["prompt"], "<a_v1> beside <b_v2>");
    assert!(dir.path().join("c/001.vec").is_file());

    let out = ok_json(dir.path(), &["split", "trees/a", "1"]);
    assert_eq!(out["record"]["parent_id"], 1);
    let out = aspectree(dir.path(), &["split", "trees/a", "1"]);
    assert_eq!(out.status.code(), Some(1));
}
