//! Payload schemas for the bus topics. `detection` carries
//! [`crate::detect::Detection`] and `actuation` carries
//! [`crate::world::ActuationCommand`].

use serde::{Deserialize, Serialize};

use crate::frame::FrameMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinPose {
    pub x_mm: f64,
    pub y_mm: f64,
    pub v_inst: f64,
    pub v_1s: f64,
    pub v_10s: f64,
    pub mismatch_px: f64,
    pub latency_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMeta {
    pub seq: u64,
    pub t_mono_us: u64,
    pub mode: FrameMode,
}

/// Histogram bucket counting samples `<= le_us`; `le_us = None` is the
/// overflow bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyBucket {
    pub le_us: Option<u64>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Telemetry {
    pub latency_buckets: Vec<LatencyBucket>,
    pub dropped_subscribers: u64,
    pub dropped_detections: u64,
    pub stale: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
}

impl Telemetry {
    pub fn event(name: impl Into<String>) -> Self {
        Self {
            event: Some(name.into()),
            ..Self::default()
        }
    }
}
