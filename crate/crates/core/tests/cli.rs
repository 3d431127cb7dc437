use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn shotfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shotfit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = shotfit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn schema(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../docs/schemas")
        .join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(schema_name: &str, file: &Path) {
    let instance: Value = serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema(schema_name)).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{} vs {schema_name}: {errors:?}", file.display());
}

fn synth_scene(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("scene");
    let mut args = vec!["synth", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn missing_spec_file_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = shotfit(&[
        "synth",
        "--spec",
        s(&dir.path().join("absent.toml")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_boundary_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let scene = synth_scene(dir.path(), &["--seed", "0", "--persons", "1"]);
    let out = shotfit(&[
        "solve-multishot",
        "--scene",
        s(&scene.join("scene.json")),
        "--boundary",
        "7",
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_scene_reports_its_json_pointer() {
    let dir = TempDir::new().unwrap();
    let scene = synth_scene(dir.path(), &["--seed", "0", "--persons", "1"]);
    let path = scene.join("scene.json");
    let mut value: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    value["frames"][1]["camera"]["fx"] = Value::String("wide".into());
    std::fs::write(&path, value.to_string()).unwrap();
    let out = shotfit(&[
        "solve-multishot",
        "--scene",
        s(&path),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/frames/1/camera/fx"));
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "weight_glob = \"heavy\"\n").unwrap();
    let out = shotfit(&["--config", s(&cfg), "--dump-config"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dump_config_round_trips_through_config_flag() {
    let dir = TempDir::new().unwrap();
    let dumped = ok(&["--dump-config"]).stdout;
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, &dumped).unwrap();
    assert_eq!(ok(&["--config", s(&cfg), "--dump-config"]).stdout, dumped);
    assert!(String::from_utf8_lossy(&dumped).contains("weight_glob"));
}

#[test]
fn eight_persons_give_eight_identities() {
    let dir = TempDir::new().unwrap();
    let scene = synth_scene(dir.path(), &["--persons", "8", "--seed", "3"]);
    let gt: Value = serde_json::from_str(&std::fs::read_to_string(scene.join("ground_truth.json")).unwrap()).unwrap();
    let ids: Vec<u64> = gt["persons"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["identity"].as_u64().unwrap())
        .collect();
    assert_eq!(ids, (0..8).collect::<Vec<_>>());
}

#[test]
fn full_pipeline_emits_schema_valid_files() {
    let dir = TempDir::new().unwrap();
    let scene = synth_scene(dir.path(), &["--seed", "1", "--persons", "2"]);
    let scene_json = scene.join("scene.json");
    let results = dir.path().join("results");
    ok(&["solve-multishot", "--scene", s(&scene_json), "--out", s(&results)]);
    ok(&[
        "solve-monocular",
        "--scene",
        s(&scene_json),
        "--multishot",
        s(&results),
        "--frame",
        "1",
        "--out",
        s(&results),
    ]);
    let analysis = dir.path().join("analysis.json");
    ok(&[
        "analyze",
        "--scene",
        s(&scene_json),
        "--results",
        s(&results),
        "--out",
        s(&analysis),
    ]);

    assert_valid("scene.schema.json", &scene_json);
    assert_valid("grid_sidecar.schema.json", &scene.join("grid.json"));
    assert_valid("ground_truth.schema.json", &scene.join("ground_truth.json"));
    assert_valid("multishot_result.schema.json", &results.join("boundary_0.json"));
    assert_valid("multishot_result.schema.json", &results.join("boundary_1.json"));
    assert_valid("monocular_result.schema.json", &results.join("frame_1.json"));
    assert_valid("analysis.schema.json", &analysis);

    let csv = String::from_utf8(
        ok(&[
            "evaluate",
            "--results",
            s(&results),
            "--truth",
            s(&scene.join("ground_truth.json")),
        ])
        .stdout,
    )
    .unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("kind,unit,person,mpjpe"));
    let aggregate = lines.last().unwrap();
    assert!(aggregate.starts_with("aggregate,all,"));
    let f1: f64 = aggregate.split(',').nth(6).unwrap().parse().unwrap();
    assert_eq!(f1, 1.0);
}

#[test]
fn triangulation_baseline_writes_results_without_bodies() {
    let dir = TempDir::new().unwrap();
    let scene = synth_scene(dir.path(), &["--seed", "2", "--persons", "3"]);
    let results = dir.path().join("r");
    ok(&[
        "solve-multishot",
        "--scene",
        s(&scene.join("scene.json")),
        "--triangulation",
        "--out",
        s(&results),
    ]);
    let out: Value = serde_json::from_str(&std::fs::read_to_string(results.join("boundary_0.json")).unwrap()).unwrap();
    assert_eq!(out["mode"], "triangulation");
    assert!(out["pairs"][0].get("params_t").is_none());
    assert_valid("multishot_result.schema.json", &results.join("boundary_0.json"));
}

#[test]
fn empty_results_give_an_empty_person_list() {
    let dir = TempDir::new().unwrap();
    let scene = synth_scene(dir.path(), &["--seed", "0", "--persons", "1"]);
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = ok(&[
        "analyze",
        "--scene",
        s(&scene.join("scene.json")),
        "--results",
        s(&empty),
    ]);
    let value: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(value["persons"], Value::Array(vec![]));
    assert_eq!(value["cameras"].as_array().unwrap().len(), 4);
}

#[test]
fn missing_ground_truth_is_a_warning() {
    let dir = TempDir::new().unwrap();
    let scene = synth_scene(dir.path(), &["--seed", "0", "--persons", "2"]);
    let results = dir.path().join("r");
    ok(&[
        "solve-multishot",
        "--scene",
        s(&scene.join("scene.json")),
        "--boundary",
        "0",
        "--out",
        s(&results),
    ]);
    let truth_path = scene.join("ground_truth.json");
    let mut truth: Value = serde_json::from_str(&std::fs::read_to_string(&truth_path).unwrap()).unwrap();
    truth["boundaries"] = Value::Array(vec![]);
    truth["frames"] = Value::Array(vec![]);
    std::fs::write(&truth_path, truth.to_string()).unwrap();
    let out = ok(&["evaluate", "--results", s(&results), "--truth", s(&truth_path)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing ground truth"));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}
