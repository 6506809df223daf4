use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn navctl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_navctl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_line(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "one-line error: {text}");
    serde_json::from_str(text.trim_end()).unwrap()
}

#[test]
fn scene_gen_names_files_by_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = navctl(&["scene", "gen", "--seed", "1", "--count", "3", "--out", "scenes"], dir.path());
    let summary = stdout_json(&out);
    assert_eq!(summary["files"].as_array().unwrap().len(), 3);
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("scenes"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["scene-000001.json", "scene-000002.json", "scene-000003.json"]);
}

#[test]
fn usage_errors_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = navctl(&["scene", "gen", "--seed", "1", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");

    let out = navctl(&["eval", "--scenes", "nowhere", "--agent", "expert"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "missing_file");

    std::fs::write(dir.path().join("bad.jsonl"), "{\"episode_id\": 1}\n").unwrap();
    navctl(&["scene", "gen", "--seed", "3", "--out", "s"], dir.path());
    let out = navctl(&["replay", "--trajectory", "bad.jsonl", "--scenes", "s", "--verify"], dir.path());
    assert_eq!(error_line(&out)["error"], "schema");

    let out = navctl(&["train", "--demos", "missing.jsonl", "--out", "x.ckpt"], dir.path());
    assert_eq!(error_line(&out)["error"], "missing_file");
}

#[test]
fn demos_replay_and_expert_eval() {
    let dir = tempfile::tempdir().unwrap();
    stdout_json(&navctl(&["scene", "gen", "--seed", "20", "--count", "2", "--out", "s"], dir.path()));
    let demos = stdout_json(&navctl(&["demos", "gen", "--scenes", "s", "--per-scene", "3", "--out", "d.jsonl"], dir.path()));
    assert_eq!(demos["trajectories"], 6);

    let replay = stdout_json(&navctl(&["replay", "--trajectory", "d.jsonl", "--scenes", "s", "--verify"], dir.path()));
    assert_eq!(replay["successes"], 6);

    let eval = stdout_json(&navctl(
        &["eval", "--agent", "expert", "--scenes", "s", "--episodes", "4", "--report", "r.json"],
        dir.path(),
    ));
    assert_eq!(eval["metrics"]["sr"], 1.0);
    assert_eq!(eval["metrics"]["spl"], 1.0);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["results"].as_array().unwrap().len(), 8);
    assert!(!report["per_goal"].as_object().unwrap().is_empty());
}

#[test]
fn tampered_trajectory_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    navctl(&["scene", "gen", "--seed", "30", "--out", "s"], dir.path());
    stdout_json(&navctl(&["demos", "gen", "--scenes", "s", "--per-scene", "1", "--out", "d.jsonl"], dir.path()));
    let text = std::fs::read_to_string(dir.path().join("d.jsonl")).unwrap();
    let mut record: Value = serde_json::from_str(text.trim()).unwrap();
    let sem = record["steps"][0]["sem"].as_array_mut().unwrap();
    let v = sem[0].as_u64().unwrap();
    sem[0] = Value::from((v + 1) % 3);
    std::fs::write(dir.path().join("d.jsonl"), format!("{record}\n")).unwrap();
    let out = navctl(&["replay", "--trajectory", "d.jsonl", "--scenes", "s", "--verify"], dir.path());
    assert_eq!(error_line(&out)["error"], "verify_failed");
}
