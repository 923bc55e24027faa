//! Stage wiring: world → renderer → detector → bus → twin-sync, and the
//! command sources that feed `actuation` back into the world.
//!
//! Live runs use one thread per stage against the monotonic clock. Lockstep
//! runs execute the same stages in a single loop on simulated time, and
//! replays feed recorded frames through detector and twin-sync with frame
//! timestamps as the clock; both are deterministic.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, TrySendError};
use serde::{Deserialize, Serialize};

use crate::bus::{Bus, Envelope, RecvError, Subscription, Topic};
use crate::calib::CalibrationTransform;
use crate::clock::{mono_us, Clock, MonotonicClock};
use crate::control::{maze_waypoints, Autopilot, AutopilotReport, AutopilotStatus, ScriptPlayer};
use crate::detect::{Detection, Detector};
use crate::frame::{Frame, FrameMode};
use crate::geom::Vec2;
use crate::messages::{FrameMeta, Telemetry, TwinPose};
use crate::pgm::{self, Recorder, Replay};
use crate::render::{CineRenderer, DsConverter};
use crate::scenario::{Scenario, ScenarioError, ScenarioMode};
use crate::server::{serve, BusServer, ServeOptions};
use crate::sync::{latency_report, median_sorted, percentile_sorted, ApplyOutcome, LatencyReport, TwinSync};
use crate::world::{step, ActuationCommand, KinematicParams, RobotState, WorldGeometry};

/// The world stops the swimmer when no command arrives for this long.
pub const COMMAND_TIMEOUT_US: u64 = 250_000;
pub const TELEMETRY_PERIOD_US: u64 = 1_000_000;
const FRAME_QUEUE: usize = 4;
/// Robot-free reference shot recorded next to the frames.
pub const SCOUT_FILE: &str = "scout.pgm";
pub const DETECTION_LOG: &str = "detections.jsonl";
pub const POSE_LOG: &str = "poses.jsonl";
pub const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Calibration,
    World,
    Renderer,
    Detector,
    Bus,
    TwinSync,
    Controller,
    Recorder,
    Replay,
    Server,
    Log,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Calibration => "calibration",
            Stage::World => "world",
            Stage::Renderer => "renderer",
            Stage::Detector => "detector",
            Stage::Bus => "bus",
            Stage::TwinSync => "twin-sync",
            Stage::Controller => "controller",
            Stage::Recorder => "recorder",
            Stage::Replay => "replay",
            Stage::Server => "server",
            Stage::Log => "log",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {message}")]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

fn fail<E: std::fmt::Display>(stage: Stage) -> impl Fn(E) -> StageError {
    move |e| StageError {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ScenarioError),
    #[error(transparent)]
    Stage(#[from] StageError),
}

impl RunError {
    /// Process exit status: 2 for configuration errors, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Stage(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClockMode {
    #[default]
    Realtime,
    /// Simulated time; stages run in a fixed order once per frame.
    Lockstep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    /// Commands only arrive over the bus.
    External,
    Script,
    Autopilot,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub clock: ClockMode,
    pub control: Control,
    pub bind: Option<String>,
    pub record_dir: Option<PathBuf>,
    /// Run logs and the persisted calibration go here.
    pub out_dir: Option<PathBuf>,
    /// End the run once the autopilot has arrived or aborted.
    pub stop_on_arrival: bool,
}

impl RunOptions {
    /// Defaults for a scenario: autopilot in maze mode, the script when
    /// present, otherwise bus-only control.
    pub fn for_scenario(sc: &Scenario) -> Self {
        let control = if sc.doc.mode == ScenarioMode::Maze {
            Control::Autopilot
        } else if sc.doc.script.is_some() {
            Control::Script
        } else {
            Control::External
        };
        Self {
            clock: ClockMode::Realtime,
            control,
            bind: None,
            record_dir: None,
            out_dir: None,
            stop_on_arrival: control == Control::Autopilot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HopStats {
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: u64,
}

impl HopStats {
    fn of(mut v: Vec<u64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_unstable();
        Self {
            mean_us: v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64,
            median_us: median_sorted(&v),
            p99_us: percentile_sorted(&v, 0.99),
        }
    }
}

/// Per-hop latency split. Each hop is measured between timestamps of the
/// same detection, so the hop means add up to the end-to-end mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HopReport {
    pub render_to_detect: HopStats,
    pub detect_to_bus: HopStats,
    pub bus_to_apply: HopStats,
    pub end_to_end: HopStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub frames: u64,
    pub dropped_frames: u64,
    pub detections: u64,
    pub twin_poses: u64,
    pub dropped_detections: u64,
    pub containment_violations: u64,
    pub final_position_mm: Vec2,
    pub latency: Option<LatencyReport>,
    pub hops: Option<HopReport>,
    pub autopilot: Option<AutopilotReport>,
    pub dropped_subscribers: u64,
}

/// Line-delimited JSON log.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, rec: &T) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

fn open_log(dir: Option<&Path>, name: &str) -> Result<Option<JsonlWriter>, StageError> {
    dir.map(|d| JsonlWriter::create(&d.join(name)))
        .transpose()
        .map_err(fail(Stage::Log))
}

fn finish_log(log: Option<JsonlWriter>) -> Result<(), StageError> {
    log.map(JsonlWriter::finish)
        .transpose()
        .map(drop)
        .map_err(fail(Stage::Log))
}

/// Robot kinematics with the command keep-alive.
#[derive(Debug, Clone)]
pub struct WorldStage {
    geom: WorldGeometry,
    params: KinematicParams,
    state: RobotState,
    t_us: Option<u64>,
    cmd: ActuationCommand,
    cmd_t_us: u64,
    violations: u64,
}

impl WorldStage {
    pub fn new(geom: WorldGeometry, params: KinematicParams, state: RobotState) -> Self {
        Self {
            geom,
            params,
            state,
            t_us: None,
            cmd: ActuationCommand::stop(),
            cmd_t_us: 0,
            violations: 0,
        }
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }

    pub fn set_command(&mut self, cmd: ActuationCommand, t_us: u64) {
        self.cmd = cmd;
        self.cmd_t_us = t_us;
    }

    /// Integrates up to `t_us`. A command older than the keep-alive timeout
    /// is replaced by stop at its expiry time.
    pub fn advance_to(&mut self, t_us: u64) {
        let Some(t0) = self.t_us else {
            self.t_us = Some(t_us);
            return;
        };
        if t_us <= t0 {
            return;
        }
        let expiry = self.cmd_t_us + COMMAND_TIMEOUT_US;
        let active_until = if self.cmd.enabled { expiry.clamp(t0, t_us) } else { t0 };
        if active_until > t0 {
            self.integrate((active_until - t0) as f64 * 1e-6);
        }
        if self.cmd.enabled && expiry <= t_us {
            self.cmd = ActuationCommand::stop();
        }
        self.state.t_us += t_us - active_until;
        self.t_us = Some(t_us);
    }

    fn integrate(&mut self, dt: f64) {
        self.state = step(&self.state, &self.cmd, &self.params, dt, &self.geom);
        if !self.geom.contains(&self.state) {
            self.violations += 1;
        }
    }
}

/// Consumes `detection` envelopes and publishes the twin.
struct SyncStage {
    sync: TwinSync,
    bus: Bus,
    log: Option<JsonlWriter>,
    twin_poses: u64,
    // [render→detect, detect→bus, bus→apply, end-to-end]
    hops: Option<Vec<[u64; 4]>>,
    next_telemetry_us: Option<u64>,
}

impl SyncStage {
    fn on_detection(&mut self, env: &Envelope, recv_us: u64, now_us: u64) -> Result<(), StageError> {
        let det: Detection = env.decode().map_err(fail(Stage::TwinSync))?;
        match self
            .sync
            .apply_detection(&det, now_us)
            .map_err(fail(Stage::TwinSync))?
        {
            ApplyOutcome::Applied(rec) => {
                self.bus
                    .publish(Topic::TwinPose, &self.sync.state().to_pose())
                    .map_err(fail(Stage::Bus))?;
                self.twin_poses += 1;
                if let Some(log) = &mut self.log {
                    log.write(&rec).map_err(fail(Stage::Log))?;
                }
                if let Some(h) = &mut self.hops {
                    h.push([
                        env.t_mono_us.saturating_sub(det.t_mono_us),
                        recv_us.saturating_sub(env.t_mono_us),
                        now_us.saturating_sub(recv_us),
                        rec.latency_us,
                    ]);
                }
            }
            ApplyOutcome::DroppedOutOfOrder => {
                log::warn!("twin-sync: dropped out-of-order detection seq {}", det.frame_seq);
            }
        }
        Ok(())
    }

    fn tick(&mut self, now_us: u64) -> Result<(), StageError> {
        let due = *self.next_telemetry_us.get_or_insert(now_us + TELEMETRY_PERIOD_US);
        if now_us < due {
            return Ok(());
        }
        self.next_telemetry_us = Some(now_us + TELEMETRY_PERIOD_US);
        self.sync.check_staleness(now_us);
        let t = self.sync.telemetry(self.bus.dropped_subscribers());
        self.bus.publish(Topic::Telemetry, &t).map_err(fail(Stage::Bus))?;
        Ok(())
    }

    fn hop_report(&self) -> Option<HopReport> {
        let h = self.hops.as_ref()?;
        let col = |i: usize| HopStats::of(h.iter().map(|r| r[i]).collect());
        Some(HopReport {
            render_to_detect: col(0),
            detect_to_bus: col(1),
            bus_to_apply: col(2),
            end_to_end: col(3),
        })
    }
}

enum Controller {
    External,
    Script(ScriptPlayer),
    Autopilot(Autopilot),
}

impl Controller {
    fn observe(&mut self, env: &Envelope, t_us: u64) {
        if let Controller::Autopilot(a) = self {
            if let Ok(p) = env.decode::<TwinPose>() {
                a.observe(Vec2::new(p.x_mm, p.y_mm), t_us);
            }
        }
    }

    fn poll(&mut self, now_us: u64) -> Option<ActuationCommand> {
        match self {
            Controller::External => None,
            Controller::Script(s) => s.poll(now_us),
            Controller::Autopilot(a) => a.poll(now_us),
        }
    }

    fn finished(&self) -> bool {
        matches!(self, Controller::Autopilot(a) if a.status() != AutopilotStatus::Running)
    }

    fn report(&self) -> Option<AutopilotReport> {
        match self {
            Controller::Autopilot(a) => Some(a.report()),
            _ => None,
        }
    }

    fn period_us(&self) -> u64 {
        match self {
            Controller::Script(s) => s.period_us(),
            _ => 10_000,
        }
    }
}

/// Everything a run needs, resolved before any stage starts.
struct Setup {
    calibration: CalibrationTransform,
    renderer: CineRenderer,
    detector: Detector,
    controller: Controller,
    world: WorldStage,
    frames: u64,
    period_us: f64,
    imaging: FrameMode,
    out_dir: Option<PathBuf>,
}

fn prepare(sc: &Scenario, opts: &RunOptions) -> Result<Setup, RunError> {
    let (calibration, record) = sc.calibration()?;
    let renderer = CineRenderer::new(&sc.geometry, sc.render_config())
        .map_err(|e| ScenarioError::Invalid(format!("render: {e}")))?;
    let detector = Detector::new(sc.doc.detector.clone())
        .map_err(|e| ScenarioError::Invalid(format!("detector: {e}")))?;
    let controller = match opts.control {
        Control::External => Controller::External,
        Control::Script => {
            let s = sc.doc.script.clone().ok_or_else(|| {
                ScenarioError::Invalid("script control requested but the scenario has no script".into())
            })?;
            Controller::Script(ScriptPlayer::new(s.steps, s.period_s))
        }
        Control::Autopilot => {
            let w = maze_waypoints(&sc.geometry).map_err(|e| ScenarioError::Invalid(format!("maze: {e}")))?;
            Controller::Autopilot(Autopilot::new(
                w,
                sc.doc.kinematics.pitch_per_rev,
                sc.doc.cruise_frequency,
            ))
        }
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(fail(Stage::Log))?;
        record
            .save(&dir.join(CALIBRATION_FILE))
            .map_err(fail(Stage::Calibration))?;
    }
    let cfg = renderer.config();
    Ok(Setup {
        calibration,
        frames: (sc.doc.duration_s * cfg.fps).round().max(1.0) as u64,
        period_us: cfg.frame_period_us(),
        renderer,
        detector,
        controller,
        world: WorldStage::new(sc.geometry.clone(), sc.doc.kinematics, sc.initial_state()),
        imaging: sc.doc.imaging,
        out_dir: opts.out_dir.clone(),
    })
}

/// Renders, converts and records one frame. Also primes the detector with
/// a robot-free scout shot before the first cine frame.
struct ImagingStage {
    renderer: CineRenderer,
    ds: Option<DsConverter>,
    recorder: Option<Recorder>,
    scout_done: bool,
}

impl ImagingStage {
    fn new(renderer: CineRenderer, imaging: FrameMode, record_dir: Option<&Path>) -> Result<Self, StageError> {
        let recorder = record_dir
            .map(|d| Recorder::create(d))
            .transpose()
            .map_err(fail(Stage::Recorder))?;
        Ok(Self {
            renderer,
            ds: (imaging == FrameMode::Ds).then(DsConverter::new),
            recorder,
            scout_done: false,
        })
    }

    fn scout(&mut self, t_us: u64, detector: &mut Detector) -> Result<(), StageError> {
        if self.scout_done || self.ds.is_some() {
            return Ok(());
        }
        self.scout_done = true;
        let scout = self.renderer.render_scene(t_us, u64::MAX);
        detector.prime(&scout).map_err(fail(Stage::Detector))?;
        if let Some(r) = &self.recorder {
            pgm::write_file(&r.dir().join(SCOUT_FILE), &scout).map_err(fail(Stage::Recorder))?;
        }
        Ok(())
    }

    fn frame(&mut self, state: &RobotState, t_us: u64, seq: u64) -> Result<Frame, StageError> {
        let cine = self
            .renderer
            .render(state, t_us, seq)
            .map_err(fail(Stage::Renderer))?;
        let frame = match &mut self.ds {
            Some(ds) => ds.convert(&cine).map_err(fail(Stage::Renderer))?,
            None => cine,
        };
        if let Some(r) = &mut self.recorder {
            r.push(&frame).map_err(fail(Stage::Recorder))?;
        }
        Ok(frame)
    }

    fn finish(self) -> Result<(), StageError> {
        if let Some(r) = self.recorder {
            r.finish().map_err(fail(Stage::Recorder))?;
        }
        Ok(())
    }
}

fn meta(frame: &Frame) -> FrameMeta {
    FrameMeta {
        seq: frame.seq,
        t_mono_us: frame.t_mono_us,
        mode: frame.mode,
    }
}

fn drain_commands(sub: &Subscription, world: &mut WorldStage, t_us: u64) {
    for env in sub.drain() {
        match env.decode::<ActuationCommand>() {
            Ok(cmd) => world.set_command(cmd, t_us),
            Err(e) => log::warn!("world: ignoring actuation: {e}"),
        }
    }
}

fn start_server(bus: &Bus, sc: &Scenario, bind: Option<&str>) -> Result<Option<BusServer>, StageError> {
    bind.map(|addr| {
        let srv = serve(
            bus.clone(),
            addr,
            ServeOptions {
                websocket: true,
                geometry_json: Some(sc.geometry_json.clone()),
            },
        )
        .map_err(fail(Stage::Server))?;
        log::info!(
            "bus on {} (websocket {:?})",
            srv.tcp_addr(),
            srv.ws_addr()
        );
        Ok(srv)
    })
    .transpose()
}

/// Runs a scenario on `bus` until its duration elapses (or the autopilot
/// finishes when `stop_on_arrival` is set).
pub fn run_on(sc: &Scenario, opts: &RunOptions, bus: &Bus) -> Result<RunSummary, RunError> {
    let setup = prepare(sc, opts)?;
    let server = start_server(bus, sc, opts.bind.as_deref())?;
    let result = match opts.clock {
        ClockMode::Realtime => run_realtime(sc, opts, setup, bus),
        ClockMode::Lockstep => run_lockstep(sc, opts, setup, bus),
    };
    if let Some(s) = server {
        s.shutdown();
    }
    result.map_err(RunError::from)
}

pub fn run(sc: &Scenario, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let bus = Bus::new();
    let out = run_on(sc, opts, &bus);
    bus.close();
    out
}

fn run_lockstep(sc: &Scenario, opts: &RunOptions, setup: Setup, bus: &Bus) -> Result<RunSummary, StageError> {
    let Setup {
        calibration,
        renderer,
        mut detector,
        mut controller,
        mut world,
        frames,
        period_us,
        imaging,
        out_dir,
    } = setup;
    let sub = |t| bus.subscribe(t).map_err(fail(Stage::Bus));
    let actuation = sub(Topic::Actuation)?;
    let detections = sub(Topic::Detection)?;
    let poses = sub(Topic::TwinPose)?;
    let mut imaging = ImagingStage::new(renderer, imaging, opts.record_dir.as_deref())?;
    let mut det_log = open_log(out_dir.as_deref(), DETECTION_LOG)?;
    let mut sync = SyncStage {
        sync: TwinSync::new(Some(calibration)),
        bus: bus.clone(),
        log: open_log(out_dir.as_deref(), POSE_LOG)?,
        twin_poses: 0,
        hops: None,
        next_telemetry_us: None,
    };
    let mut n_frames = 0;
    let mut n_det = 0;

    for k in 0..frames {
        let t = (k as f64 * period_us).round() as u64;
        for env in poses.drain() {
            controller.observe(&env, t);
        }
        if let Some(cmd) = controller.poll(t) {
            bus.publish(Topic::Actuation, &cmd).map_err(fail(Stage::Controller))?;
        }
        if opts.stop_on_arrival && controller.finished() {
            break;
        }

        drain_commands(&actuation, &mut world, t);
        world.advance_to(t);
        imaging.scout(t, &mut detector)?;
        let frame = imaging.frame(world.state(), t, k)?;
        n_frames += 1;
        bus.publish(Topic::FrameMeta, &meta(&frame)).map_err(fail(Stage::Bus))?;

        if let Some(d) = detector.process(&frame).map_err(fail(Stage::Detector))? {
            bus.publish(Topic::Detection, &d).map_err(fail(Stage::Bus))?;
            if let Some(log) = &mut det_log {
                log.write(&d).map_err(fail(Stage::Log))?;
            }
            n_det += 1;
        }

        for env in detections.drain() {
            sync.on_detection(&env, t, t)?;
        }
        sync.tick(t)?;
    }
    abort_event(bus, &controller);
    imaging.finish()?;
    finish_log(det_log)?;
    finish_log(sync.log.take())?;
    Ok(summary(sc, n_frames, 0, n_det, &sync, &world, &controller, bus))
}

fn abort_event(bus: &Bus, controller: &Controller) {
    if matches!(controller, Controller::Autopilot(a) if a.status() == AutopilotStatus::Aborted) {
        let _ = bus.publish(Topic::Telemetry, &Telemetry::event("autopilot_aborted"));
    }
}

#[allow(clippy::too_many_arguments)]
fn summary(
    sc: &Scenario,
    frames: u64,
    dropped_frames: u64,
    detections: u64,
    sync: &SyncStage,
    world: &WorldStage,
    controller: &Controller,
    bus: &Bus,
) -> RunSummary {
    RunSummary {
        scenario: sc.doc.name.clone(),
        frames,
        dropped_frames,
        detections,
        twin_poses: sync.twin_poses,
        dropped_detections: sync.sync.dropped_out_of_order(),
        containment_violations: world.violations(),
        final_position_mm: world.state().position,
        latency: latency_report(sync.sync.latencies()).ok(),
        hops: sync.hop_report(),
        autopilot: controller.report(),
        dropped_subscribers: bus.dropped_subscribers(),
    }
}

fn run_realtime(sc: &Scenario, opts: &RunOptions, setup: Setup, bus: &Bus) -> Result<RunSummary, StageError> {
    let Setup {
        calibration,
        renderer,
        mut detector,
        mut controller,
        mut world,
        frames,
        period_us,
        imaging,
        out_dir,
    } = setup;
    let clock = MonotonicClock;
    let stop = AtomicBool::new(false);
    let world_done = AtomicBool::new(false);
    let detector_done = AtomicBool::new(false);

    let sub = |t| bus.subscribe(t).map_err(fail(Stage::Bus));
    let actuation = sub(Topic::Actuation)?;
    let detections = sub(Topic::Detection)?;
    let poses = sub(Topic::TwinPose)?;
    let mut imaging = ImagingStage::new(renderer, imaging, opts.record_dir.as_deref())?;
    let mut det_log = open_log(out_dir.as_deref(), DETECTION_LOG)?;
    let mut sync = SyncStage {
        sync: TwinSync::new(Some(calibration)),
        bus: bus.clone(),
        log: open_log(out_dir.as_deref(), POSE_LOG)?,
        twin_poses: 0,
        hops: Some(Vec::new()),
        next_telemetry_us: None,
    };
    let (frame_tx, frame_rx) = bounded::<Arc<Frame>>(FRAME_QUEUE);
    imaging.scout(clock.now_us(), &mut detector)?;
    let start = clock.now_us() + 5_000;

    let raise = |e: StageError| {
        stop.store(true, Ordering::Release);
        e
    };

    let (world_res, det_res, sync_res, ctl_res) = thread::scope(|s| {
        let world_h = s.spawn(|| {
            let out = (|| {
                let mut dropped = 0;
                let mut n = 0;
                for k in 0..frames {
                    if stop.load(Ordering::Acquire) {
                        break;
                    }
                    clock.sleep_until(start + (k as f64 * period_us).round() as u64);
                    let t = clock.now_us();
                    drain_commands(&actuation, &mut world, t);
                    world.advance_to(t);
                    let frame = imaging.frame(world.state(), t, k)?;
                    n += 1;
                    bus.publish(Topic::FrameMeta, &meta(&frame)).map_err(fail(Stage::Bus))?;
                    match frame_tx.try_send(Arc::new(frame)) {
                        Ok(()) => {}
                        Err(TrySendError::Full(_)) => dropped += 1,
                        Err(TrySendError::Disconnected(_)) => break,
                    }
                }
                Ok((n, dropped))
            })();
            drop(frame_tx);
            world_done.store(true, Ordering::Release);
            out.map_err(raise)
        });

        let det_h = s.spawn(|| {
            let out = (|| {
                let mut n = 0u64;
                for frame in frame_rx.iter() {
                    if let Some(d) = detector.process(&frame).map_err(fail(Stage::Detector))? {
                        bus.publish(Topic::Detection, &d).map_err(fail(Stage::Bus))?;
                        if let Some(log) = &mut det_log {
                            log.write(&d).map_err(fail(Stage::Log))?;
                        }
                        n += 1;
                    }
                }
                Ok(n)
            })();
            detector_done.store(true, Ordering::Release);
            out.map_err(raise)
        });

        let sync_h = s.spawn(|| {
            (|| {
                loop {
                    match detections.recv_timeout(Duration::from_millis(20)) {
                        Ok(env) => {
                            let recv = mono_us();
                            sync.on_detection(&env, recv, clock.now_us())?;
                        }
                        Err(RecvError::Timeout) => {
                            if detector_done.load(Ordering::Acquire) && detections.pending() == 0 {
                                break;
                            }
                        }
                        Err(RecvError::Closed) => break,
                    }
                    sync.tick(clock.now_us())?;
                }
                Ok(())
            })()
            .map_err(raise)
        });

        let ctl_h = s.spawn(|| {
            (|| {
                let period = controller.period_us();
                while !world_done.load(Ordering::Acquire) {
                    let now = clock.now_us();
                    for env in poses.drain() {
                        controller.observe(&env, now);
                    }
                    if let Some(cmd) = controller.poll(now) {
                        bus.publish(Topic::Actuation, &cmd).map_err(fail(Stage::Controller))?;
                    }
                    if opts.stop_on_arrival && controller.finished() {
                        stop.store(true, Ordering::Release);
                        break;
                    }
                    clock.sleep_until(now + period);
                }
                abort_event(bus, &controller);
                Ok(())
            })()
            .map_err(raise)
        });

        (
            world_h.join().expect("world thread"),
            det_h.join().expect("detector thread"),
            sync_h.join().expect("twin-sync thread"),
            ctl_h.join().expect("controller thread"),
        )
    });

    let (n_frames, dropped) = world_res?;
    let n_det = det_res?;
    sync_res?;
    ctl_res?;
    imaging.finish()?;
    finish_log(det_log)?;
    finish_log(sync.log.take())?;
    Ok(summary(sc, n_frames, dropped, n_det, &sync, &world, &controller, bus))
}

/// Feeds recorded frames through detector and twin-sync, using each frame's
/// timestamp as the current time.
pub fn replay(sc: &Scenario, dir: &Path, out_dir: Option<&Path>) -> Result<RunSummary, RunError> {
    let (calibration, record) = sc.calibration()?;
    let mut detector = Detector::new(sc.doc.detector.clone())
        .map_err(|e| ScenarioError::Invalid(format!("detector: {e}")))?;
    let frames = Replay::open(dir).map_err(fail(Stage::Replay))?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(fail(Stage::Log))?;
        record
            .save(&d.join(CALIBRATION_FILE))
            .map_err(fail(Stage::Calibration))?;
    }
    let scout = dir.join(SCOUT_FILE);
    if scout.exists() {
        let f = pgm::read_file(&scout).map_err(fail(Stage::Replay))?;
        detector.prime(&f).map_err(fail(Stage::Detector))?;
    }

    let bus = Bus::new();
    let detections = bus.subscribe(Topic::Detection).map_err(fail(Stage::Bus))?;
    let mut det_log = open_log(out_dir, DETECTION_LOG)?;
    let mut sync = SyncStage {
        sync: TwinSync::new(Some(calibration)),
        bus: bus.clone(),
        log: open_log(out_dir, POSE_LOG)?,
        twin_poses: 0,
        hops: None,
        next_telemetry_us: None,
    };
    let mut n_frames = 0;
    let mut n_det = 0;
    for frame in frames.frames() {
        let frame = frame.map_err(fail(Stage::Replay))?;
        let t = frame.t_mono_us;
        n_frames += 1;
        if let Some(d) = detector.process(&frame).map_err(fail(Stage::Detector))? {
            bus.publish(Topic::Detection, &d).map_err(fail(Stage::Bus))?;
            if let Some(log) = &mut det_log {
                log.write(&d).map_err(fail(Stage::Log))?;
            }
            n_det += 1;
        }
        for env in detections.drain() {
            sync.on_detection(&env, t, t)?;
        }
        sync.tick(t)?;
    }
    finish_log(det_log)?;
    finish_log(sync.log.take())?;
    bus.close();
    let world = WorldStage::new(sc.geometry.clone(), sc.doc.kinematics, sc.initial_state());
    let mut s = summary(sc, n_frames, 0, n_det, &sync, &world, &Controller::External, &bus);
    s.final_position_mm = sync.sync.state().pose;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub duration_s: f64,
    pub frames: u64,
    pub detections: u64,
    pub latency: LatencyReport,
    pub hops: HopReport,
}

/// Live run reporting end-to-end and per-hop latency.
pub fn bench_latency(sc: &Scenario, opts: &RunOptions) -> Result<BenchReport, RunError> {
    let opts = RunOptions {
        clock: ClockMode::Realtime,
        ..opts.clone()
    };
    let s = run(sc, &opts)?;
    let no_det = || StageError {
        stage: Stage::TwinSync,
        message: "no detections were applied; latency report is empty".into(),
    };
    Ok(BenchReport {
        scenario: s.scenario,
        duration_s: sc.doc.duration_s,
        frames: s.frames,
        detections: s.detections,
        latency: s.latency.ok_or_else(no_det)?,
        hops: s.hops.ok_or_else(no_det)?,
    })
}
