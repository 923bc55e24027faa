use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fluorotwin"))
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn phantom() -> PathBuf {
    scenarios().join("branched-phantom.scenario.json")
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

/// Copies the phantom scenario into `dir` after letting `edit` change it.
fn edited_phantom(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(phantom()).unwrap()).unwrap();
    edit(&mut doc);
    fs::copy(
        scenarios().join("branched-phantom.geometry.json"),
        dir.join("branched-phantom.geometry.json"),
    )
    .unwrap();
    let p = dir.join("edited.scenario.json");
    fs::write(&p, serde_json::to_string(&doc).unwrap()).unwrap();
    p
}

#[test]
fn fast_run_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--fast", "--duration", "2", "--scenario"])
        .arg(phantom())
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    let s = stdout_json(&o);
    assert_eq!(s["frames"], 60);
    assert_eq!(s["containment_violations"], 0);
    assert!(dir.path().join("calibration.json").exists());
    assert!(dir.path().join("poses.jsonl").exists());
}

#[test]
fn record_then_replay_matches() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("rec");
    let o = bin()
        .args(["record", "--fast", "--headless", "--duration", "1", "--scenario"])
        .arg(phantom())
        .arg("--record")
        .arg(&rec)
        .arg("--out")
        .arg(dir.path().join("live"))
        .output()
        .unwrap();
    let live = stdout_json(&o);
    let replays: Vec<Value> = ["a", "b"]
        .iter()
        .map(|name| {
            let o = bin()
                .args(["replay", "--scenario"])
                .arg(phantom())
                .arg("--replay")
                .arg(&rec)
                .arg("--out")
                .arg(dir.path().join(name))
                .output()
                .unwrap();
            stdout_json(&o)
        })
        .collect();
    assert_eq!(replays[0], replays[1]);
    assert_eq!(replays[0]["detections"], live["detections"]);
    assert_eq!(
        fs::read(dir.path().join("a/poses.jsonl")).unwrap(),
        fs::read(dir.path().join("b/poses.jsonl")).unwrap()
    );
}

#[test]
fn missing_calibration_exits_2_and_says_so() {
    let dir = tempfile::tempdir().unwrap();
    let p = edited_phantom(dir.path(), |d| {
        d.as_object_mut().unwrap().remove("calibration");
    });
    let o = bin()
        .args(["run", "--fast", "--duration", "1", "--scenario"])
        .arg(&p)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("calibration"), "{err}");
    assert!(!dir.path().join("out/poses.jsonl").exists());
}

#[test]
fn bad_scenarios_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let walled_in = edited_phantom(dir.path(), |d| {
        d["robot"]["start"] = serde_json::json!([10.0, 40.0]);
    });
    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, "{ not json").unwrap();
    for p in [walled_in, garbage, dir.path().join("missing.json")] {
        let o = bin()
            .args(["run", "--fast", "--scenario"])
            .arg(&p)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(2), "{}", p.display());
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
}

#[test]
fn maze_verb_arrives() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["maze", "--fast", "--scenario"])
        .arg(scenarios().join("maze.scenario.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    let s = stdout_json(&o);
    assert_eq!(s["autopilot"]["status"], "arrived");
    assert_eq!(s["autopilot"]["waypoints"].as_array().unwrap().len(), 7);
}

#[test]
fn contrast_verb_prints_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let frame = dir.path().join("f.pgm");
    let mut px = vec![200u8; 60 * 20];
    for y in 2..8 {
        for x in 2..8 {
            px[y * 60 + x] = 140;
        }
        for x in 30..36 {
            px[y * 60 + x] = 100;
        }
    }
    let mut bytes = b"P5\n60 20\n255\n".to_vec();
    bytes.extend_from_slice(&px);
    fs::write(&frame, bytes).unwrap();
    let roi = dir.path().join("roi.json");
    fs::write(
        &roi,
        r#"{"reference":[2,2,6,6],"background":[0,12,60,8],
            "objects":[{"name":"coil","rect":[30,2,6,6]}]}"#,
    )
    .unwrap();

    let o = bin().arg("contrast").arg(&frame).arg("--roi").arg(&roi).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let line = table.lines().find(|l| l.contains("coil")).unwrap();
    assert!(line.contains("exceeds reference"), "{table}");

    let o = bin()
        .arg("contrast")
        .arg(&frame)
        .arg("--roi")
        .arg(&roi)
        .arg("--json")
        .output()
        .unwrap();
    let rows = stdout_json(&o);
    let ratio = rows[0]["ratio"].as_f64().unwrap();
    assert!((ratio - 100.0 / 60.0).abs() < 1e-9, "{ratio}");
}

#[test]
fn contrast_with_bad_roi_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let frame = dir.path().join("f.pgm");
    fs::write(&frame, b"P5\n2 2\n255\n\x01\x02\x03\x04").unwrap();
    let roi = dir.path().join("roi.json");
    fs::write(&roi, "[]").unwrap();
    let o = bin().arg("contrast").arg(&frame).arg("--roi").arg(&roi).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
