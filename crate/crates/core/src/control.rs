//! Command sources that close the loop: a timed script and the maze
//! autopilot.

use serde::{Deserialize, Serialize};

use crate::geom::Vec2;
use crate::maze::{solve_maze, MazeError, MazeGraph};
use crate::scenario::ScriptStep;
use crate::sync::STALE_AFTER_US;
use crate::world::{ActuationCommand, WorldGeometry};

pub const WAYPOINT_TOLERANCE_MM: f64 = 1.0;
/// Autopilot gives up once the twin has been stale this long.
pub const STALE_ABORT_US: u64 = 2_000_000;
/// Time constant of the approach law near a waypoint, s.
const APPROACH_TAU_S: f64 = 0.25;

/// Replays scripted steps, re-sending the active command every period.
#[derive(Debug, Clone)]
pub struct ScriptPlayer {
    steps: Vec<ScriptStep>,
    period_us: u64,
    start_us: Option<u64>,
    next_emit_us: u64,
}

impl ScriptPlayer {
    pub fn new(steps: Vec<ScriptStep>, period_s: f64) -> Self {
        Self {
            steps,
            period_us: (period_s * 1e6).round().max(1.0) as u64,
            start_us: None,
            next_emit_us: 0,
        }
    }

    pub fn period_us(&self) -> u64 {
        self.period_us
    }

    /// Command active `elapsed_us` after the start; stop once the script
    /// has run out.
    pub fn command_at(&self, elapsed_us: u64) -> ActuationCommand {
        let mut t = 0.0;
        let elapsed = elapsed_us as f64 * 1e-6;
        for s in &self.steps {
            t += s.duration_s;
            if elapsed < t {
                return ActuationCommand {
                    axis_angle: s.axis_angle,
                    frequency: s.frequency,
                    enabled: s.enabled,
                };
            }
        }
        ActuationCommand::stop()
    }

    pub fn poll(&mut self, now_us: u64) -> Option<ActuationCommand> {
        let start = *self.start_us.get_or_insert(now_us);
        if now_us < self.next_emit_us {
            return None;
        }
        self.next_emit_us = now_us + self.period_us;
        Some(self.command_at(now_us - start))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutopilotStatus {
    Running,
    Arrived,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutopilotReport {
    pub status: AutopilotStatus,
    pub waypoints: Vec<Vec2>,
    pub reached: usize,
    pub commands: u64,
}

/// Drives the twin through waypoints along straight steps.
///
/// Each command points at the current waypoint with frequency
/// `min(cruise, distance / (pitch * 0.25 s))`, so the swimmer slows down on
/// approach. A waypoint counts as reached within 1 mm.
#[derive(Debug, Clone)]
pub struct Autopilot {
    waypoints: Vec<Vec2>,
    next: usize,
    pitch_per_rev: f64,
    cruise_hz: f64,
    last_pose: Option<(Vec2, u64)>,
    started_us: Option<u64>,
    status: AutopilotStatus,
    commands: u64,
}

impl Autopilot {
    pub fn new(waypoints: Vec<Vec2>, pitch_per_rev: f64, cruise_hz: f64) -> Self {
        Self {
            waypoints,
            next: 0,
            pitch_per_rev,
            cruise_hz,
            last_pose: None,
            started_us: None,
            status: AutopilotStatus::Running,
            commands: 0,
        }
    }

    pub fn status(&self) -> AutopilotStatus {
        self.status
    }

    pub fn report(&self) -> AutopilotReport {
        AutopilotReport {
            status: self.status,
            waypoints: self.waypoints.clone(),
            reached: self.next,
            commands: self.commands,
        }
    }

    /// Feeds a twin pose received at `t_us`.
    pub fn observe(&mut self, pose: Vec2, t_us: u64) {
        self.last_pose = Some((pose, t_us));
    }

    pub fn poll(&mut self, now_us: u64) -> Option<ActuationCommand> {
        if self.status != AutopilotStatus::Running {
            return None;
        }
        let started = *self.started_us.get_or_insert(now_us);
        let since = |t: u64| now_us.saturating_sub(t);
        let Some((pose, t_pose)) = self.last_pose else {
            if since(started) > STALE_AFTER_US + STALE_ABORT_US {
                self.status = AutopilotStatus::Aborted;
            }
            return None;
        };
        if since(t_pose) > STALE_AFTER_US + STALE_ABORT_US {
            self.status = AutopilotStatus::Aborted;
            return Some(self.emit(ActuationCommand::stop()));
        }
        while self.next < self.waypoints.len()
            && pose.distance(self.waypoints[self.next]) <= WAYPOINT_TOLERANCE_MM
        {
            self.next += 1;
        }
        if self.next == self.waypoints.len() {
            self.status = AutopilotStatus::Arrived;
            return (self.commands > 0).then(|| self.emit(ActuationCommand::stop()));
        }
        if since(t_pose) > STALE_AFTER_US {
            return Some(self.emit(ActuationCommand::stop()));
        }
        let d = self.waypoints[self.next] - pose;
        let f = self
            .cruise_hz
            .min(d.norm() / (self.pitch_per_rev * APPROACH_TAU_S));
        Some(self.emit(ActuationCommand {
            axis_angle: d.angle(),
            frequency: f,
            enabled: true,
        }))
    }

    fn emit(&mut self, cmd: ActuationCommand) -> ActuationCommand {
        self.commands += 1;
        cmd
    }
}

/// World-space centers of the solved maze steps.
pub fn maze_waypoints(geom: &WorldGeometry) -> Result<Vec<Vec2>, MazeError> {
    let grid = geom.maze.ok_or(MazeError::NoGrid)?;
    let graph = MazeGraph::from_geometry(geom)?;
    Ok(solve_maze(&graph)?
        .into_iter()
        .map(|c| grid.cell_center(c))
        .collect())
}
