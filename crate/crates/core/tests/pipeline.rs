use std::fs;
use std::path::Path;

use fluorotwin::calib::CalibrationRecord;
use fluorotwin::control::{Autopilot, AutopilotStatus};
use fluorotwin::detect::Detector;
use fluorotwin::frame::FrameMode;
use fluorotwin::geom::Vec2;
use fluorotwin::pipeline::{
    self, ClockMode, Control, RunError, RunOptions, WorldStage, CALIBRATION_FILE, DETECTION_LOG,
    POSE_LOG, SCOUT_FILE,
};
use fluorotwin::render::{CineRenderer, RenderConfig};
use fluorotwin::scenario::{bundled, Scenario};
use fluorotwin::sync::{ApplyOutcome, PoseRecord, TwinSync};
use fluorotwin::world::{KinematicParams, RobotState, WorldGeometry};
use fluorotwin::{Bus, Detection, Topic};

fn phantom(duration_s: f64) -> Scenario {
    let mut sc = Scenario::load(bundled::branched_phantom()).unwrap();
    sc.set_duration(duration_s).unwrap();
    sc
}

fn lockstep(sc: &Scenario) -> RunOptions {
    RunOptions {
        clock: ClockMode::Lockstep,
        ..RunOptions::for_scenario(sc)
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(p: &Path) -> Vec<T> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn record_then_replay_is_bitwise_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("frames");
    let sc = phantom(3.0);
    let opts = RunOptions {
        record_dir: Some(rec.clone()),
        out_dir: Some(dir.path().join("live")),
        ..lockstep(&sc)
    };
    let live = pipeline::run(&sc, &opts).unwrap();
    assert_eq!(live.frames, 90);
    assert!(rec.join("manifest.json").exists());
    assert!(rec.join(SCOUT_FILE).exists());

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ra = pipeline::replay(&sc, &rec, Some(&a)).unwrap();
    let rb = pipeline::replay(&sc, &rec, Some(&b)).unwrap();
    assert_eq!(ra, rb);
    for log in [DETECTION_LOG, POSE_LOG] {
        let x = fs::read(a.join(log)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(log)).unwrap(), "{log}");
    }
    // replay of a lockstep recording reproduces the live detections
    assert_eq!(
        fs::read(a.join(DETECTION_LOG)).unwrap(),
        fs::read(dir.path().join("live").join(DETECTION_LOG)).unwrap()
    );
    let dets: Vec<Detection> = read_jsonl(&a.join(DETECTION_LOG));
    assert_eq!(dets.len(), 90);
    assert!(dets.windows(2).all(|w| w[0].frame_seq < w[1].frame_seq));
}

#[test]
fn lockstep_runs_are_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: u64, name: &str| {
        let mut sc = phantom(2.0);
        sc.set_seed(seed);
        let out = dir.path().join(name);
        let opts = RunOptions {
            out_dir: Some(out.clone()),
            ..lockstep(&sc)
        };
        pipeline::run(&sc, &opts).unwrap();
        fs::read(out.join(POSE_LOG)).unwrap()
    };
    assert_eq!(run(5, "a"), run(5, "b"));
    assert_ne!(run(5, "c"), run(6, "d"));
}

#[test]
fn calibration_record_is_persisted_and_reusable() {
    let dir = tempfile::tempdir().unwrap();
    let sc = phantom(1.0);
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..lockstep(&sc)
    };
    pipeline::run(&sc, &opts).unwrap();
    let rec = CalibrationRecord::load(&dir.path().join(CALIBRATION_FILE)).unwrap();
    assert_eq!(rec.transform().unwrap(), sc.calibration().unwrap().0);
}

#[test]
fn missing_calibration_refuses_to_run() {
    let mut sc = phantom(1.0);
    sc.doc.calibration = None;
    let err = pipeline::run(&sc, &lockstep(&sc)).unwrap_err();
    assert!(matches!(err, RunError::Config(_)));
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("calibration"), "{err}");
}

#[test]
fn ds_mode_detects_displaced_robot() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = phantom(3.0);
    sc.doc.imaging = FrameMode::Ds;
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..lockstep(&sc)
    };
    let s = pipeline::run(&sc, &opts).unwrap();
    assert_eq!(s.containment_violations, 0);
    // nothing to see until the swimmer clears its own start footprint
    assert!(s.detections > 30 && s.detections < 90, "{s:?}");
    let poses: Vec<PoseRecord> = read_jsonl(&dir.path().join(POSE_LOG));
    let last = poses.last().unwrap();
    assert!((last.x_mm - s.final_position_mm.x).abs() < 1.0, "{last:?} vs {s:?}");
}

#[test]
fn realtime_run_publishes_twin_poses_on_the_bus() {
    let sc = phantom(2.0);
    let bus = Bus::new();
    let poses = bus.subscribe(Topic::TwinPose).unwrap();
    let meta = bus.subscribe(Topic::FrameMeta).unwrap();
    let telemetry = bus.subscribe(Topic::Telemetry).unwrap();
    let s = pipeline::run_on(&sc, &RunOptions::for_scenario(&sc), &bus).unwrap();
    assert_eq!(s.frames, 60);
    assert_eq!(poses.pending() as u64, s.twin_poses);
    assert_eq!(meta.pending(), 60);
    assert!(telemetry.pending() >= 1);
    assert!(s.twin_poses >= 58, "{s:?}");
    let hops = s.hops.unwrap();
    let sum = hops.render_to_detect.mean_us + hops.detect_to_bus.mean_us + hops.bus_to_apply.mean_us;
    assert!((sum - hops.end_to_end.mean_us).abs() <= 0.05 * hops.end_to_end.mean_us);
}

#[test]
fn bench_report_shape_is_stable() {
    let sc = phantom(1.0);
    let opts = RunOptions::for_scenario(&sc);
    let keys = |v: &serde_json::Value| -> Vec<String> {
        fn walk(v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
            if let Some(m) = v.as_object() {
                for (k, x) in m {
                    let p = format!("{prefix}.{k}");
                    out.push(p.clone());
                    walk(x, &p, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(v, "", &mut out);
        out
    };
    let a = serde_json::to_value(pipeline::bench_latency(&sc, &opts).unwrap()).unwrap();
    let b = serde_json::to_value(pipeline::bench_latency(&sc, &opts).unwrap()).unwrap();
    assert_eq!(keys(&a), keys(&b));
    for k in ["median_us", "p99_us", "histogram"] {
        assert!(a["latency"].get(k).is_some(), "{k}");
    }
}

#[test]
fn bench_without_detections_fails() {
    let mut sc = phantom(0.5);
    sc.doc.render.robot_attenuation = 5;
    let err = pipeline::bench_latency(&sc, &RunOptions::for_scenario(&sc)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("no detections"), "{err}");
}

/// Closed loop without the harness: world, renderer, detector, twin and
/// autopilot stepped by hand at 30 fps.
fn closed_loop(start: Vec2, waypoints: Vec<Vec2>, max_frames: u64) -> (Autopilot, RobotState, u64) {
    let geom = WorldGeometry::branched_phantom();
    let sc = phantom(1.0);
    let (calib, _) = sc.calibration().unwrap();
    let r = CineRenderer::new(&geom, RenderConfig::default()).unwrap();
    let mut det = Detector::new(Default::default()).unwrap();
    det.prime(&r.render_scene(0, u64::MAX)).unwrap();
    let mut twin = TwinSync::new(Some(calib));
    let kin = KinematicParams::default();
    let mut world = WorldStage::new(geom, kin, RobotState::new(start, 0.0, 4.0, 0.8));
    let mut ap = Autopilot::new(waypoints, kin.pitch_per_rev, 4.0);
    let mut commands = 0;
    for k in 0..max_frames {
        let t = k * 33_333;
        if let Some(cmd) = ap.poll(t) {
            world.set_command(cmd, t);
            commands += 1;
        }
        world.advance_to(t);
        let frame = r.render(world.state(), t, k).unwrap();
        if let Some(d) = det.process(&frame).unwrap() {
            if let ApplyOutcome::Applied(p) = twin.apply_detection(&d, t).unwrap() {
                ap.observe(Vec2::new(p.x_mm, p.y_mm), t);
            }
        }
        if ap.status() != AutopilotStatus::Running {
            // let any residual motion play out
            world.advance_to(t + 1_000_000);
            break;
        }
    }
    assert_eq!(world.violations(), 0);
    (ap, *world.state(), commands)
}

#[test]
fn autopilot_single_waypoint_stops_within_tolerance() {
    let target = Vec2::new(20.0, 0.0);
    let (ap, end, commands) = closed_loop(Vec2::new(10.0, 0.0), vec![target], 600);
    assert_eq!(ap.status(), AutopilotStatus::Arrived);
    assert!(end.position.distance(target) <= 1.0, "{:?}", end.position);
    assert!(commands > 0);
    // one straight phase: every command points along +x or is the final stop
    assert_eq!(ap.report().reached, 1);
}

#[test]
fn autopilot_already_at_end_sends_nothing() {
    let (ap, end, commands) = closed_loop(Vec2::new(10.0, 0.0), vec![Vec2::new(10.4, 0.0)], 30);
    assert_eq!(ap.status(), AutopilotStatus::Arrived);
    assert_eq!(commands, 0);
    assert_eq!(end.position, Vec2::new(10.0, 0.0));
}

#[test]
fn maze_autopilot_lockstep_reaches_end_without_violations() {
    let sc = Scenario::load(bundled::maze()).unwrap();
    let opts = RunOptions {
        clock: ClockMode::Lockstep,
        control: Control::Autopilot,
        ..RunOptions::for_scenario(&sc)
    };
    let s = pipeline::run(&sc, &opts).unwrap();
    let ap = s.autopilot.unwrap();
    assert_eq!(ap.status, AutopilotStatus::Arrived);
    assert_eq!(ap.waypoints.len(), 7);
    assert_eq!(s.containment_violations, 0);
    let end = sc.geometry.maze.unwrap();
    assert!(s.final_position_mm.distance(end.cell_center(end.end_cell())) <= 1.5);
}
