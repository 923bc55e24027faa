//! Virtual-twin teleoperation workbench.
//!
//! A simulated magnetic microrobot moves through a 2-D channel or maze, is
//! rendered as synthetic fluoroscopy, detected in each frame, mapped to world
//! coordinates through a two-fiducial calibration and mirrored by a twin
//! whose state is published on a small pub/sub bus.

pub mod bus;
pub mod calib;
pub mod clock;
pub mod contrast;
pub mod control;
pub mod detect;
pub mod frame;
pub mod geom;
pub mod maze;
pub mod messages;
pub mod pgm;
pub mod pipeline;
pub mod render;
pub mod scenario;
pub mod server;
pub mod sync;
pub mod world;

pub use bus::{Bus, BusError, Envelope, Subscription, Topic};
pub use calib::{calibrate, CalibrationError, CalibrationRecord, CalibrationTransform, FiducialPair};
pub use clock::{Clock, MonotonicClock, SimClock};
pub use detect::{relative_contrast, Detection, Detector, DetectorParams};
pub use frame::{Frame, FrameMode, PixelRect};
pub use geom::Vec2;
pub use maze::{solve_maze, MazeGraph};
pub use messages::{FrameMeta, LatencyBucket, Telemetry, TwinPose};
pub use render::{render_cine, render_ds, CineRenderer, RenderConfig};
pub use server::{serve, BusServer, ServeOptions};
pub use sync::{latency_report, velocity_estimates, LatencyReport, TwinSync};
pub use world::{step, ActuationCommand, KinematicParams, RobotState, WorldGeometry};
pub use pipeline::{bench_latency, replay, run, ClockMode, Control, RunError, RunOptions, RunSummary};
pub use scenario::Scenario;
