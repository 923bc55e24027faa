//! Virtual-twin state driven by the detection stream: world pose, velocity
//! windows, twin/real mismatch and capture-to-apply latency.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::calib::CalibrationTransform;
use crate::detect::Detection;
use crate::geom::Vec2;
use crate::messages::{LatencyBucket, Telemetry, TwinPose};

/// Twin is flagged stale after this long without a detection.
pub const STALE_AFTER_US: u64 = 500_000;
pub const WINDOW_1S_US: u64 = 1_000_000;
pub const WINDOW_10S_US: u64 = 10_000_000;

/// Upper bucket edges of the latency histogram, µs.
pub const LATENCY_BUCKETS_US: [u64; 10] = [
    1_000, 2_000, 5_000, 10_000, 20_000, 50_000, 100_000, 200_000, 500_000, 1_000_000,
];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SyncError {
    #[error("no calibration: calibrate before starting twin synchronization")]
    MissingCalibration,
    #[error("detection stamped {det_us} µs is later than now ({now_us} µs)")]
    FutureDetection { det_us: u64, now_us: u64 },
    #[error("latency history is empty")]
    EmptyHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrailSample {
    pub t_mono_us: u64,
    pub pose: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocities {
    pub v_inst: f64,
    pub v_1s: f64,
    pub v_10s: f64,
}

/// Instantaneous and windowed speeds (mm/s) of a time-ordered trail.
///
/// A window's speed is the arc length travelled inside `[now - W, now]`
/// (the segment straddling the window start counts pro rata) divided by
/// `min(W, now - oldest sample)`. A window holding fewer than two samples
/// reports 0.
pub fn velocity_estimates(trail: &VecDeque<TrailSample>, now_us: u64) -> Velocities {
    let n = trail.len();
    let v_inst = if n >= 2 {
        let (a, b) = (trail[n - 2], trail[n - 1]);
        let dt = b.t_mono_us.saturating_sub(a.t_mono_us);
        if dt > 0 {
            a.pose.distance(b.pose) / (dt as f64 * 1e-6)
        } else {
            0.0
        }
    } else {
        0.0
    };
    Velocities {
        v_inst,
        v_1s: windowed_speed(trail, now_us, WINDOW_1S_US),
        v_10s: windowed_speed(trail, now_us, WINDOW_10S_US),
    }
}

fn windowed_speed(trail: &VecDeque<TrailSample>, now_us: u64, window_us: u64) -> f64 {
    let cutoff = now_us.saturating_sub(window_us);
    let first_in = trail.partition_point(|s| s.t_mono_us < cutoff);
    if trail.len() - first_in < 2 {
        return 0.0;
    }
    let mut arc: f64 = trail
        .range(first_in..)
        .zip(trail.range(first_in + 1..))
        .map(|(a, b)| a.pose.distance(b.pose))
        .sum();
    if first_in > 0 {
        let (a, b) = (trail[first_in - 1], trail[first_in]);
        let frac = (b.t_mono_us - cutoff) as f64 / (b.t_mono_us - a.t_mono_us) as f64;
        arc += a.pose.distance(b.pose) * frac;
    }
    let span_us = window_us.min(now_us.saturating_sub(trail[0].t_mono_us));
    if span_us == 0 {
        return 0.0;
    }
    arc / (span_us as f64 * 1e-6)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TwinState {
    pub pose: Vec2,
    pub last_detection_seq: Option<u64>,
    pub last_detection_t_us: Option<u64>,
    pub trail: VecDeque<TrailSample>,
    pub velocities: Velocities,
    pub mismatch_px: f64,
    pub latency_us: u64,
    pub stale: bool,
}

impl TwinState {
    pub fn to_pose(&self) -> TwinPose {
        TwinPose {
            x_mm: self.pose.x,
            y_mm: self.pose.y,
            v_inst: self.velocities.v_inst,
            v_1s: self.velocities.v_1s,
            v_10s: self.velocities.v_10s,
            mismatch_px: self.mismatch_px,
            latency_us: self.latency_us,
        }
    }
}

/// Line of the run log: one per applied detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub seq: u64,
    pub t_mono_us: u64,
    pub x_mm: f64,
    pub y_mm: f64,
    pub v_inst: f64,
    pub v_1s: f64,
    pub v_10s: f64,
    pub mismatch_px: f64,
    pub latency_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApplyOutcome {
    Applied(PoseRecord),
    /// Sequence or timestamp did not advance; counted, not applied.
    DroppedOutOfOrder,
}

/// Single writer over the twin state.
#[derive(Debug, Clone)]
pub struct TwinSync {
    calibration: Option<CalibrationTransform>,
    state: TwinState,
    latencies: Vec<u64>,
    dropped_out_of_order: u64,
}

impl TwinSync {
    pub fn new(calibration: Option<CalibrationTransform>) -> Self {
        Self {
            calibration,
            state: TwinState {
                stale: true,
                ..TwinState::default()
            },
            latencies: Vec::new(),
            dropped_out_of_order: 0,
        }
    }

    pub fn state(&self) -> &TwinState {
        &self.state
    }

    pub fn calibration(&self) -> Option<&CalibrationTransform> {
        self.calibration.as_ref()
    }

    pub fn latencies(&self) -> &[u64] {
        &self.latencies
    }

    pub fn dropped_out_of_order(&self) -> u64 {
        self.dropped_out_of_order
    }

    pub fn apply_detection(&mut self, det: &Detection, now_mono_us: u64) -> Result<ApplyOutcome, SyncError> {
        let calib = self.calibration.ok_or(SyncError::MissingCalibration)?;
        if det.t_mono_us > now_mono_us {
            return Err(SyncError::FutureDetection {
                det_us: det.t_mono_us,
                now_us: now_mono_us,
            });
        }
        let st = &mut self.state;
        let regressed = st.last_detection_seq.is_some_and(|s| det.frame_seq <= s)
            || st.last_detection_t_us.is_some_and(|t| det.t_mono_us <= t);
        if regressed {
            self.dropped_out_of_order += 1;
            return Ok(ApplyOutcome::DroppedOutOfOrder);
        }

        let pose = calib.px_to_world(det.centroid);
        st.mismatch_px = match st.last_detection_seq {
            Some(_) => calib.world_to_px(st.pose).distance(det.centroid),
            None => 0.0,
        };
        st.pose = pose;
        st.last_detection_seq = Some(det.frame_seq);
        st.last_detection_t_us = Some(det.t_mono_us);
        st.trail.push_back(TrailSample {
            t_mono_us: det.t_mono_us,
            pose,
        });
        // keep one sample older than the long window for the pro-rata segment
        let cutoff = det.t_mono_us.saturating_sub(WINDOW_10S_US);
        while st.trail.len() > 2 && st.trail[1].t_mono_us <= cutoff {
            st.trail.pop_front();
        }
        st.velocities = velocity_estimates(&st.trail, det.t_mono_us);
        st.latency_us = now_mono_us - det.t_mono_us;
        st.stale = false;
        self.latencies.push(st.latency_us);

        Ok(ApplyOutcome::Applied(PoseRecord {
            seq: det.frame_seq,
            t_mono_us: det.t_mono_us,
            x_mm: pose.x,
            y_mm: pose.y,
            v_inst: st.velocities.v_inst,
            v_1s: st.velocities.v_1s,
            v_10s: st.velocities.v_10s,
            mismatch_px: st.mismatch_px,
            latency_us: st.latency_us,
        }))
    }

    /// Refreshes and returns the staleness flag. The pose is held, never
    /// extrapolated.
    pub fn check_staleness(&mut self, now_mono_us: u64) -> bool {
        self.state.stale = match self.state.last_detection_t_us {
            None => true,
            Some(t) => now_mono_us.saturating_sub(t) > STALE_AFTER_US,
        };
        self.state.stale
    }

    pub fn telemetry(&self, dropped_subscribers: u64) -> Telemetry {
        Telemetry {
            latency_buckets: histogram(&self.latencies),
            dropped_subscribers,
            dropped_detections: self.dropped_out_of_order,
            stale: self.state.stale,
            event: None,
        }
    }

    pub fn latency_report(&self) -> Result<LatencyReport, SyncError> {
        latency_report(&self.latencies)
    }
}

pub fn histogram(latencies: &[u64]) -> Vec<LatencyBucket> {
    let mut buckets: Vec<LatencyBucket> = LATENCY_BUCKETS_US
        .iter()
        .map(|&le| LatencyBucket {
            le_us: Some(le),
            count: 0,
        })
        .chain(std::iter::once(LatencyBucket {
            le_us: None,
            count: 0,
        }))
        .collect();
    for &l in latencies {
        let i = LATENCY_BUCKETS_US.partition_point(|&le| le < l);
        buckets[i].count += 1;
    }
    buckets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub count: usize,
    pub median_us: f64,
    pub p99_us: u64,
    pub min_us: u64,
    pub max_us: u64,
    pub histogram: Vec<LatencyBucket>,
}

/// Exact order statistics. The median of an even count averages the two
/// middle values; p99 is the nearest-rank percentile.
pub fn latency_report(latencies: &[u64]) -> Result<LatencyReport, SyncError> {
    if latencies.is_empty() {
        return Err(SyncError::EmptyHistory);
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(LatencyReport {
        count: n,
        median_us: median_sorted(&sorted),
        p99_us: percentile_sorted(&sorted, 0.99),
        min_us: sorted[0],
        max_us: sorted[n - 1],
        histogram: histogram(latencies),
    })
}

pub fn median_sorted(sorted: &[u64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    }
}

pub fn percentile_sorted(sorted: &[u64], q: f64) -> u64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}
