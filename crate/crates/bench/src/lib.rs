//! Shared fixtures for the criterion benches.

use fluorotwin::scenario::{bundled, Scenario};
use fluorotwin::world::RobotState;
use fluorotwin::{CalibrationTransform, CineRenderer, Detector, Frame, WorldGeometry};

pub struct Fixture {
    pub renderer: CineRenderer,
    pub detector: Detector,
    pub calibration: CalibrationTransform,
    pub robot: RobotState,
    pub frame: Frame,
}

/// Bundled phantom scenario with a primed detector and one rendered frame.
pub fn phantom() -> Fixture {
    let sc = Scenario::load(bundled::branched_phantom()).expect("bundled scenario");
    let geom: WorldGeometry = sc.geometry.clone();
    let renderer = CineRenderer::new(&geom, sc.render_config()).expect("renderer");
    let mut detector = Detector::new(sc.doc.detector.clone()).expect("detector");
    detector
        .prime(&renderer.render_scene(0, u64::MAX))
        .expect("prime");
    let robot = sc.initial_state();
    let frame = renderer.render(&robot, 0, 0).expect("frame");
    let (calibration, _) = sc.calibration().expect("calibration");
    Fixture {
        renderer,
        detector,
        calibration,
        robot,
        frame,
    }
}
