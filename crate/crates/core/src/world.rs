//! Ground-truth world: phantom channels, maze walls and the kinematics of the
//! magnetically driven helical swimmer.
//!
//! Coordinates are millimeters, y-up. Free space for the robot is modelled
//! with a disk footprint of diameter `body_width`:
//!
//! * channel mode: the disk center must stay within `half_width(t) - r` of
//!   some channel centerline segment, where `half_width` is interpolated
//!   linearly along the segment;
//! * maze mode: no wall segment may come closer than `r` to the center.
//!
//! Commands that would breach a boundary slide along it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::{Rect, Segment, Vec2};
use crate::maze::MazeGraph;

/// Upper bound of the rotating-field frequency the actuator can produce.
pub const F_MAX_HZ: f64 = 100.0;

/// Slack allowed when testing containment, in mm.
pub const CONTAINMENT_EPS: f64 = 1e-9;

const MAX_SUBSTEP_MM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("cannot read geometry document {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("geometry document parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid `{key}`: {reason}")]
    Schema { key: String, reason: String },
    #[error("open maze boundary: cell ({col}, {row}) leaks to the exterior")]
    OpenBoundary { col: usize, row: usize },
}

fn schema_err(key: impl Into<String>, reason: impl Into<String>) -> GeometryError {
    GeometryError::Schema {
        key: key.into(),
        reason: reason.into(),
    }
}

/// On-disk geometry document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryDocument {
    pub units: String,
    pub reference_length_mm: f64,
    pub fiducials: [Vec2; 2],
    #[serde(default)]
    pub channels: Vec<ChannelDocument>,
    #[serde(default)]
    pub walls: Vec<[Vec2; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maze: Option<MazeGrid>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub points: Vec<Vec2>,
    pub widths: Vec<f64>,
}

/// Uniform grid underlying a maze. Cells are `(col, row)` with row 0 at the
/// bottom (smallest y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeGrid {
    pub origin: Vec2,
    pub cell_mm: f64,
    pub cols: usize,
    pub rows: usize,
    pub start: [usize; 2],
    pub end: [usize; 2],
}

impl MazeGrid {
    pub fn cell_center(&self, cell: (usize, usize)) -> Vec2 {
        self.origin
            + Vec2::new(
                (cell.0 as f64 + 0.5) * self.cell_mm,
                (cell.1 as f64 + 0.5) * self.cell_mm,
            )
    }

    pub fn start_cell(&self) -> (usize, usize) {
        (self.start[0], self.start[1])
    }

    pub fn end_cell(&self) -> (usize, usize) {
        (self.end[0], self.end[1])
    }
}

/// A channel centerline with a per-vertex full width.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: Option<String>,
    pub points: Vec<Vec2>,
    pub widths: Vec<f64>,
}

impl Channel {
    /// Iterates `(segment, width_at_a, width_at_b)`.
    pub fn segments(&self) -> impl Iterator<Item = (Segment, f64, f64)> + '_ {
        self.points
            .windows(2)
            .zip(self.widths.windows(2))
            .map(|(p, w)| (Segment::new(p[0], p[1]), w[0], w[1]))
    }
}

/// Validated world geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldGeometry {
    pub channels: Vec<Channel>,
    pub walls: Vec<Segment>,
    pub fiducials: [Vec2; 2],
    pub reference_length_mm: f64,
    pub extent: Rect,
    pub maze: Option<MazeGrid>,
}

pub mod bundled {
    //! Geometry documents shipped in `scenarios/`.
    pub const BRANCHED_PHANTOM: &str =
        include_str!("../../../scenarios/branched-phantom.geometry.json");
    pub const MAZE: &str = include_str!("../../../scenarios/maze.geometry.json");
}

impl WorldGeometry {
    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let doc: GeometryDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn branched_phantom() -> Self {
        Self::from_json(bundled::BRANCHED_PHANTOM).expect("bundled phantom geometry is valid")
    }

    pub fn maze() -> Self {
        Self::from_json(bundled::MAZE).expect("bundled maze geometry is valid")
    }

    pub fn from_document(doc: &GeometryDocument) -> Result<Self, GeometryError> {
        if doc.units != "mm" {
            return Err(schema_err("units", format!("expected \"mm\", got {:?}", doc.units)));
        }
        if !(doc.reference_length_mm.is_finite() && doc.reference_length_mm > 0.0) {
            return Err(schema_err("reference_length_mm", "must be a positive number"));
        }
        let fid_dist = doc.fiducials[0].distance(doc.fiducials[1]);
        if (fid_dist - doc.reference_length_mm).abs() > 1e-9 {
            return Err(schema_err(
                "fiducials",
                format!(
                    "fiducial distance {fid_dist} mm differs from reference_length_mm {}",
                    doc.reference_length_mm
                ),
            ));
        }
        if doc.channels.is_empty() && doc.maze.is_none() {
            return Err(schema_err("channels", "geometry needs at least one channel or a maze"));
        }

        let mut extent = Rect::empty();
        let mut channels = Vec::with_capacity(doc.channels.len());
        for (i, ch) in doc.channels.iter().enumerate() {
            if ch.points.len() < 2 {
                return Err(schema_err(
                    format!("channels[{i}].points"),
                    "a channel needs at least two points",
                ));
            }
            if ch.widths.len() != ch.points.len() {
                return Err(schema_err(
                    format!("channels[{i}].widths"),
                    format!("{} widths for {} points", ch.widths.len(), ch.points.len()),
                ));
            }
            if let Some(j) = ch.widths.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(schema_err(
                    format!("channels[{i}].widths[{j}]"),
                    "width must be positive",
                ));
            }
            if ch.points.iter().any(|p| !p.is_finite()) {
                return Err(schema_err(format!("channels[{i}].points"), "non-finite point"));
            }
            for (p, w) in ch.points.iter().zip(&ch.widths) {
                extent.include(*p, w / 2.0);
            }
            channels.push(Channel {
                name: ch.name.clone(),
                points: ch.points.clone(),
                widths: ch.widths.clone(),
            });
        }

        let mut walls = Vec::with_capacity(doc.walls.len());
        for (i, [a, b]) in doc.walls.iter().enumerate() {
            if !(a.is_finite() && b.is_finite()) || a == b {
                return Err(schema_err(format!("walls[{i}]"), "degenerate wall segment"));
            }
            if a.x != b.x && a.y != b.y {
                return Err(schema_err(format!("walls[{i}]"), "walls must be axis-aligned"));
            }
            extent.include(*a, 0.0);
            extent.include(*b, 0.0);
            walls.push(Segment::new(*a, *b));
        }
        for f in &doc.fiducials {
            extent.include(*f, 0.0);
        }

        if let Some(grid) = &doc.maze {
            if !(grid.cell_mm.is_finite() && grid.cell_mm > 0.0) {
                return Err(schema_err("maze.cell_mm", "must be positive"));
            }
            if grid.cols == 0 || grid.rows == 0 {
                return Err(schema_err("maze", "grid must have at least one cell"));
            }
            for (key, c) in [("maze.start", grid.start), ("maze.end", grid.end)] {
                if c[0] >= grid.cols || c[1] >= grid.rows {
                    return Err(schema_err(key, "cell outside the grid"));
                }
            }
            if grid.start == grid.end {
                return Err(schema_err("maze.end", "END must differ from START"));
            }
            extent.include(grid.origin, 0.0);
            extent.include(
                grid.origin
                    + Vec2::new(grid.cols as f64 * grid.cell_mm, grid.rows as f64 * grid.cell_mm),
                0.0,
            );
        }

        let geom = WorldGeometry {
            channels,
            walls,
            fiducials: doc.fiducials,
            reference_length_mm: doc.reference_length_mm,
            extent,
            maze: doc.maze,
        };
        if geom.maze.is_some() {
            let graph = MazeGraph::from_geometry(&geom).expect("maze grid present");
            if let Some((col, row)) = graph.leak_from_start() {
                return Err(GeometryError::OpenBoundary { col, row });
            }
        }
        Ok(geom)
    }

    /// Signed clearance of a disk of `radius` centered at `p`: non-negative
    /// when the disk is inside free space.
    pub fn clearance(&self, p: Vec2, radius: f64) -> f64 {
        let mut slack = f64::INFINITY;
        if !self.channels.is_empty() {
            slack = self.channel_slack(p, radius).0;
        }
        for w in &self.walls {
            slack = slack.min(w.distance_to(p) - radius);
        }
        slack
    }

    pub fn is_free(&self, p: Vec2, radius: f64) -> bool {
        self.clearance(p, radius) >= -CONTAINMENT_EPS
    }

    pub fn contains(&self, state: &RobotState) -> bool {
        self.is_free(state.position, state.body_width / 2.0)
    }

    // Best (largest) slack over all channel segments, with the segment and
    // its interpolated half-width at the closest point.
    fn channel_slack(&self, p: Vec2, radius: f64) -> (f64, Option<(Vec2, f64)>) {
        let mut best = (f64::NEG_INFINITY, None);
        for ch in &self.channels {
            for (seg, wa, wb) in ch.segments() {
                let t = seg.project_param(p);
                let c = seg.point_at(t);
                let half = (wa + (wb - wa) * t) / 2.0;
                let s = half - radius - c.distance(p);
                if s > best.0 {
                    best = (s, Some((c, half)));
                }
            }
        }
        best
    }

    /// Pushes `p` back onto the free-space boundary along the violated
    /// constraints' normals.
    fn push_out(&self, mut p: Vec2, radius: f64) -> Vec2 {
        for _ in 0..4 {
            if !self.channels.is_empty() {
                if let (s, Some((c, half))) = self.channel_slack(p, radius) {
                    if s < 0.0 {
                        let allowed = (half - radius).max(0.0);
                        p = c + (p - c).normalized() * allowed;
                    }
                }
            }
            for w in &self.walls {
                let q = w.closest_point(p);
                let d = q.distance(p);
                if d < radius && d > 0.0 {
                    p = q + (p - q) * (radius / d);
                }
            }
            if self.is_free(p, radius) {
                break;
            }
        }
        p
    }
}

/// Commanded rotating-field state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuationCommand {
    pub axis_angle: f64,
    pub frequency: f64,
    pub enabled: bool,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CommandError {
    #[error("frequency {0} Hz outside [0, {F_MAX_HZ}]")]
    Frequency(f64),
    #[error("axis_angle must be finite")]
    Angle,
}

impl ActuationCommand {
    pub fn new(axis_angle: f64, frequency: f64, enabled: bool) -> Result<Self, CommandError> {
        let cmd = Self {
            axis_angle,
            frequency,
            enabled,
        };
        cmd.validate()?;
        Ok(cmd)
    }

    pub fn stop() -> Self {
        Self {
            axis_angle: 0.0,
            frequency: 0.0,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<(), CommandError> {
        if !self.axis_angle.is_finite() {
            return Err(CommandError::Angle);
        }
        if !(0.0..=F_MAX_HZ).contains(&self.frequency) {
            return Err(CommandError::Frequency(self.frequency));
        }
        Ok(())
    }
}

/// Helical swimmer speed law parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KinematicParams {
    /// Forward advance per field revolution, mm.
    pub pitch_per_rev: f64,
    pub step_out_freq: f64,
    /// Fraction of the step-out speed retained above step-out.
    pub damping: f64,
}

impl Default for KinematicParams {
    fn default() -> Self {
        Self {
            pitch_per_rev: 2.0,
            step_out_freq: 50.0,
            damping: 0.0,
        }
    }
}

impl KinematicParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.pitch_per_rev.is_finite() && self.pitch_per_rev > 0.0) {
            return Err("pitch_per_rev must be positive".into());
        }
        if !(self.step_out_freq > 0.0 && self.step_out_freq <= F_MAX_HZ) {
            return Err(format!("step_out_freq must be in (0, {F_MAX_HZ}]"));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err("damping must be in [0, 1]".into());
        }
        Ok(())
    }

    /// Forward speed in mm/s produced by `cmd`.
    pub fn speed(&self, cmd: &ActuationCommand) -> f64 {
        if !cmd.enabled {
            0.0
        } else if cmd.frequency <= self.step_out_freq {
            self.pitch_per_rev * cmd.frequency
        } else {
            self.pitch_per_rev * self.step_out_freq * self.damping
        }
    }
}

/// Simulated swimmer pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Vec2,
    pub heading: f64,
    pub body_length: f64,
    pub body_width: f64,
    /// Simulation time, µs.
    pub t_us: u64,
}

impl RobotState {
    pub fn new(position: Vec2, heading: f64, body_length: f64, body_width: f64) -> Self {
        Self {
            position,
            heading,
            body_length,
            body_width,
            t_us: 0,
        }
    }

    pub fn radius(&self) -> f64 {
        self.body_width / 2.0
    }
}

/// Advances the swimmer by `dt` seconds under `cmd`.
///
/// Motion is integrated in sub-steps of at most 0.1 mm. A sub-step that
/// would leave free space is pushed back onto the boundary, which removes
/// the normal component of the motion (wall sliding); if that still fails,
/// the largest admissible fraction of the sub-step is taken.
pub fn step(
    state: &RobotState,
    cmd: &ActuationCommand,
    params: &KinematicParams,
    dt: f64,
    geom: &WorldGeometry,
) -> RobotState {
    let mut next = *state;
    next.t_us = state.t_us + (dt * 1e6).round() as u64;
    let speed = params.speed(cmd);
    let total = speed * dt;
    if !(total > 0.0) {
        return next;
    }
    let radius = state.radius();
    let dir = Vec2::from_angle(cmd.axis_angle);
    let n = (total / MAX_SUBSTEP_MM).ceil().max(1.0) as usize;
    let delta = dir * (total / n as f64);

    let mut p = state.position;
    for _ in 0..n {
        let cand = p + delta;
        if geom.is_free(cand, radius) {
            p = cand;
            continue;
        }
        let pushed = geom.push_out(cand, radius);
        if geom.is_free(pushed, radius) && (pushed - p).norm() <= delta.norm() + 1e-12 {
            p = pushed;
            continue;
        }
        // Largest admissible fraction of the sub-step.
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if geom.is_free(p + delta * mid, radius) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        p = p + delta * lo;
    }

    let moved = p - state.position;
    if moved.norm() > 1e-12 {
        next.heading = moved.angle();
    }
    next.position = p;
    next
}

/// Exact pose of the simulated robot, for oracles and audits.
pub fn ground_truth(state: &RobotState) -> (Vec2, f64) {
    (state.position, state.heading)
}
