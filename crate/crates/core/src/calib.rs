//! Pixel ↔ world similarity transform from two fiducials and a known length.
//!
//! Image coordinates are y-down, world coordinates y-up. Mapping a pixel
//! offset to the world negates its y component first, then rotates by
//! `rotation` (counter-clockwise in world terms) and scales by `scale`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::Vec2;

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("degenerate fiducials: points are {distance_px:.3} px apart, need at least 1 px")]
    DegenerateFiducials { distance_px: f64 },
    #[error("reference length must be positive, got {0}")]
    ReferenceLength(f64),
    #[error("calibration record {path}: {reason}")]
    Record { path: String, reason: String },
}

/// Two operator-marked fiducial pixels and the physical distance between
/// them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiducialPair {
    pub p1: Vec2,
    pub p2: Vec2,
    pub reference_length_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTransform {
    /// mm per pixel.
    pub scale: f64,
    /// Radians.
    pub rotation: f64,
    pub anchor_px: Vec2,
    pub anchor_world: Vec2,
}

fn flip_y(v: Vec2) -> Vec2 {
    Vec2::new(v.x, -v.y)
}

/// Solves the transform that puts `p1` on `anchor_world` and the direction
/// `p1 → p2` along `world_axis`.
pub fn calibrate(
    fid: &FiducialPair,
    anchor_world: Vec2,
    world_axis: f64,
) -> Result<CalibrationTransform, CalibrationError> {
    if !(fid.reference_length_mm.is_finite() && fid.reference_length_mm > 0.0) {
        return Err(CalibrationError::ReferenceLength(fid.reference_length_mm));
    }
    let d = fid.p2 - fid.p1;
    let distance_px = d.norm();
    if !(distance_px >= 1.0) {
        return Err(CalibrationError::DegenerateFiducials { distance_px });
    }
    Ok(CalibrationTransform {
        scale: fid.reference_length_mm / distance_px,
        rotation: normalize_angle(world_axis - flip_y(d).angle()),
        anchor_px: fid.p1,
        anchor_world,
    })
}

fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

impl CalibrationTransform {
    pub fn px_to_world(&self, p: Vec2) -> Vec2 {
        self.anchor_world + flip_y(p - self.anchor_px).rotate(self.rotation) * self.scale
    }

    pub fn world_to_px(&self, w: Vec2) -> Vec2 {
        self.anchor_px + flip_y(((w - self.anchor_world) * (1.0 / self.scale)).rotate(-self.rotation))
    }
}

/// Persisted calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRecord {
    pub p1_px: Vec2,
    pub p2_px: Vec2,
    pub reference_length_mm: f64,
    pub anchor_world_mm: Vec2,
    pub world_axis_rad: f64,
    pub created_t_wall_us: u64,
}

impl CalibrationRecord {
    pub fn new(fid: &FiducialPair, anchor_world: Vec2, world_axis: f64) -> Self {
        Self {
            p1_px: fid.p1,
            p2_px: fid.p2,
            reference_length_mm: fid.reference_length_mm,
            anchor_world_mm: anchor_world,
            world_axis_rad: world_axis,
            created_t_wall_us: crate::clock::wall_us(),
        }
    }

    pub fn transform(&self) -> Result<CalibrationTransform, CalibrationError> {
        calibrate(
            &FiducialPair {
                p1: self.p1_px,
                p2: self.p2_px,
                reference_length_mm: self.reference_length_mm,
            },
            self.anchor_world_mm,
            self.world_axis_rad,
        )
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let rec_err = |reason: String| CalibrationError::Record {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| rec_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| rec_err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        fs::write(path, text + "\n").map_err(|e| CalibrationError::Record {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}
