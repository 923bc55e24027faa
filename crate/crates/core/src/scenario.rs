//! Scenario files: one JSON document naming the geometry and every stage's
//! parameters.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::{CalibrationError, CalibrationRecord, CalibrationTransform, FiducialPair};
use crate::detect::DetectorParams;
use crate::frame::FrameMode;
use crate::geom::Vec2;
use crate::render::RenderConfig;
use crate::world::{ActuationCommand, GeometryError, KinematicParams, RobotState, WorldGeometry};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("no calibration: the scenario has neither `calibration.record` nor `calibration.fiducials_px`; calibrate before starting twin-sync")]
    MissingCalibration,
    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioMode {
    #[default]
    Live,
    Replay,
    Maze,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub start: Vec2,
    #[serde(default)]
    pub heading: f64,
    pub body_length: f64,
    pub body_width: f64,
}

/// Either operator-marked fiducial pixels (combined with the geometry's
/// fiducials and reference length) or a saved record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum CalibrationSpec {
    Fiducials { fiducials_px: [Vec2; 2] },
    Record { record: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    pub duration_s: f64,
    pub axis_angle: f64,
    pub frequency: f64,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default = "default_script_period")]
    pub period_s: f64,
    pub steps: Vec<ScriptStep>,
}

fn default_script_period() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub name: String,
    /// Relative paths resolve against the scenario file's directory.
    pub geometry: PathBuf,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub detector: DetectorParams,
    #[serde(default)]
    pub kinematics: KinematicParams,
    pub robot: RobotSpec,
    #[serde(default)]
    pub calibration: Option<CalibrationSpec>,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: ScenarioMode,
    #[serde(default = "default_imaging")]
    pub imaging: FrameMode,
    #[serde(default)]
    pub script: Option<Script>,
    /// Autopilot cruise frequency, Hz.
    #[serde(default = "default_cruise")]
    pub cruise_frequency: f64,
}

fn default_duration() -> f64 {
    10.0
}

fn default_imaging() -> FrameMode {
    FrameMode::Cine
}

fn default_cruise() -> f64 {
    4.0
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub doc: ScenarioDocument,
    pub base_dir: PathBuf,
    pub geometry: WorldGeometry,
    /// Geometry document text as served to the console.
    pub geometry_json: String,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = read(path)?;
        let doc: ScenarioDocument =
            serde_json::from_str(&text).map_err(|source| ScenarioError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_document(doc, base_dir)
    }

    pub fn from_document(doc: ScenarioDocument, base_dir: PathBuf) -> Result<Self, ScenarioError> {
        let geometry_path = base_dir.join(&doc.geometry);
        let geometry_json = read(&geometry_path)?;
        let geometry = WorldGeometry::from_json(&geometry_json)?;
        let sc = Self {
            doc,
            base_dir,
            geometry,
            geometry_json,
        };
        sc.validate()?;
        Ok(sc)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let d = &self.doc;
        self.render_config()
            .validate()
            .map_err(|e| ScenarioError::Invalid(format!("render: {e}")))?;
        d.detector
            .validate()
            .map_err(|e| ScenarioError::Invalid(format!("detector: {e}")))?;
        d.kinematics
            .validate()
            .map_err(|e| ScenarioError::Invalid(format!("kinematics: {e}")))?;
        if !(d.duration_s.is_finite() && d.duration_s > 0.0) {
            return bad(format!("duration_s must be positive, got {}", d.duration_s));
        }
        let r = &d.robot;
        if !(r.body_width > 0.0 && r.body_length >= r.body_width) {
            return bad("robot: need 0 < body_width <= body_length".into());
        }
        if !self.geometry.contains(&self.initial_state()) {
            return bad(format!(
                "robot.start ({}, {}) is not inside free space",
                r.start.x, r.start.y
            ));
        }
        if let Some(s) = &d.script {
            if !(s.period_s > 0.0) {
                return bad("script.period_s must be positive".into());
            }
            for (i, st) in s.steps.iter().enumerate() {
                if !(st.duration_s >= 0.0) {
                    return bad(format!("script.steps[{i}].duration_s must be non-negative"));
                }
                ActuationCommand::new(st.axis_angle, st.frequency, st.enabled)
                    .map_err(|e| ScenarioError::Invalid(format!("script.steps[{i}]: {e}")))?;
            }
        }
        if !(d.cruise_frequency > 0.0) {
            return bad("cruise_frequency must be positive".into());
        }
        if d.mode == ScenarioMode::Maze && self.geometry.maze.is_none() {
            return bad("maze mode needs a geometry with a maze grid".into());
        }
        Ok(())
    }

    /// Render config with the scenario seed applied.
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            noise_seed: self.doc.seed,
            ..self.doc.render.clone()
        }
    }

    pub fn initial_state(&self) -> RobotState {
        let r = &self.doc.robot;
        RobotState::new(r.start, r.heading, r.body_length, r.body_width)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.doc.seed = seed;
    }

    pub fn set_duration(&mut self, duration_s: f64) -> Result<(), ScenarioError> {
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(ScenarioError::Invalid(format!(
                "duration must be positive, got {duration_s}"
            )));
        }
        self.doc.duration_s = duration_s;
        Ok(())
    }

    /// Resolves the calibration. Fiducial pixels are paired with the
    /// geometry's world fiducials; the world axis is the direction from the
    /// first world fiducial to the second.
    pub fn calibration(&self) -> Result<(CalibrationTransform, CalibrationRecord), ScenarioError> {
        let rec = match &self.doc.calibration {
            None => return Err(ScenarioError::MissingCalibration),
            Some(CalibrationSpec::Record { record }) => {
                CalibrationRecord::load(&self.base_dir.join(record))?
            }
            Some(CalibrationSpec::Fiducials { fiducials_px }) => {
                let [w1, w2] = self.geometry.fiducials;
                CalibrationRecord::new(
                    &FiducialPair {
                        p1: fiducials_px[0],
                        p2: fiducials_px[1],
                        reference_length_mm: self.geometry.reference_length_mm,
                    },
                    w1,
                    (w2 - w1).angle(),
                )
            }
        };
        Ok((rec.transform()?, rec))
    }
}

/// Bundled scenario files.
pub mod bundled {
    use std::path::PathBuf;

    pub fn dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
    }

    pub fn branched_phantom() -> PathBuf {
        dir().join("branched-phantom.scenario.json")
    }

    pub fn maze() -> PathBuf {
        dir().join("maze.scenario.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_load() {
        let p = Scenario::load(bundled::branched_phantom()).unwrap();
        let (t, _) = p.calibration().unwrap();
        assert_eq!(t.scale, 0.5);
        assert_eq!(t.rotation, 0.0);
        let m = Scenario::load(bundled::maze()).unwrap();
        assert_eq!(m.doc.mode, ScenarioMode::Maze);
        let (t, _) = m.calibration().unwrap();
        assert!((t.scale - m.doc.render.mm_per_px).abs() < 1e-12);
    }

    #[test]
    fn calibration_matches_render_projection() {
        for path in [bundled::branched_phantom(), bundled::maze()] {
            let sc = Scenario::load(path).unwrap();
            let (t, _) = sc.calibration().unwrap();
            let proj = sc.render_config().projection();
            for w in [Vec2::new(3.0, 4.0), Vec2::new(50.0, -7.5)] {
                assert!(t.world_to_px(w).distance(proj.to_px(w)) < 1e-9);
            }
        }
    }

    #[test]
    fn missing_calibration_is_named() {
        let mut sc = Scenario::load(bundled::branched_phantom()).unwrap();
        sc.doc.calibration = None;
        let err = sc.calibration().unwrap_err();
        assert!(err.to_string().contains("calibration"), "{err}");
    }

    #[test]
    fn start_outside_free_space_rejected() {
        let sc = Scenario::load(bundled::branched_phantom()).unwrap();
        let mut doc = sc.doc.clone();
        doc.robot.start = Vec2::new(10.0, 30.0);
        let err = Scenario::from_document(doc, sc.base_dir.clone()).unwrap_err();
        assert!(err.to_string().contains("robot.start"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        fs::write(&path, r#"{"name":"x","geometry":"g.json","robot":{"start":[0,0],"body_length":1,"body_width":1},"bogus":1}"#).unwrap();
        assert!(matches!(Scenario::load(&path), Err(ScenarioError::Parse { .. })));
    }
}
