//! Synthetic fluoroscopy: cine frames of the world and digital subtraction.
//!
//! Pixel centers sit at integer coordinates, so pixel `(i, j)` covers
//! `[i - 0.5, i + 0.5) x [j - 0.5, j + 0.5)`. The image y axis points down.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::frame::{Frame, FrameMode, PixelRect};
use crate::geom::{Segment, Vec2};
use crate::world::{RobotState, WorldGeometry};

/// Largest gray-level contrast used for phantom walls.
pub const MAX_WALL_CONTRAST: u8 = 5;

/// Mid-gray that encodes zero difference in DS frames.
pub const DS_ZERO: u8 = 128;

const SUPERSAMPLE: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RenderError {
    #[error("robot pose ({x_mm:.3}, {y_mm:.3}) mm projects to pixel ({px:.1}, {py:.1}) outside the frame")]
    PoseOutOfFrame {
        x_mm: f64,
        y_mm: f64,
        px: f64,
        py: f64,
    },
    #[error("frame dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("digital subtraction needs cine inputs")]
    NotCine,
    #[error("invalid render config: {0}")]
    Config(String),
}

/// A transient region of shifted background level, e.g. the magnet or arm
/// passing through the beam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionEvent {
    pub t_start_us: u64,
    pub t_end_us: u64,
    pub region: PixelRect,
    pub level_shift: f64,
}

impl OcclusionEvent {
    pub fn active_at(&self, t_us: u64) -> bool {
        self.t_start_us <= t_us && t_us < self.t_end_us
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub background_level: u8,
    pub robot_attenuation: u8,
    pub fiducial_attenuation: u8,
    pub fiducial_radius_px: f64,
    pub wall_contrast: u8,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub mm_per_px: f64,
    /// Pixel position of the world origin.
    pub origin_px: Vec2,
    pub occlusion_events: Vec<OcclusionEvent>,
    pub fps: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            background_level: 200,
            robot_attenuation: 80,
            fiducial_attenuation: 60,
            fiducial_radius_px: 3.0,
            wall_contrast: 3,
            noise_sigma: 3.0,
            noise_seed: 0,
            mm_per_px: 0.5,
            origin_px: Vec2::new(100.0, 240.0),
            occlusion_events: Vec::new(),
            fps: 30.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::Config(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("frame size must be non-zero");
        }
        if !(self.mm_per_px.is_finite() && self.mm_per_px > 0.0) {
            return bad("mm_per_px must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.wall_contrast > MAX_WALL_CONTRAST {
            return bad("wall_contrast must not exceed 5 gray levels");
        }
        if self.robot_attenuation > self.background_level {
            return bad("robot_attenuation exceeds background_level");
        }
        Ok(())
    }

    pub fn projection(&self) -> Projection {
        Projection {
            mm_per_px: self.mm_per_px,
            origin_px: self.origin_px,
        }
    }

    pub fn frame_period_us(&self) -> f64 {
        1e6 / self.fps
    }
}

/// The renderer's world→image mapping: axis-aligned, y flipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mm_per_px: f64,
    pub origin_px: Vec2,
}

impl Projection {
    pub fn to_px(&self, w: Vec2) -> Vec2 {
        Vec2::new(
            self.origin_px.x + w.x / self.mm_per_px,
            self.origin_px.y - w.y / self.mm_per_px,
        )
    }

    pub fn to_world(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            (p.x - self.origin_px.x) * self.mm_per_px,
            (self.origin_px.y - p.y) * self.mm_per_px,
        )
    }
}

/// Cine renderer with the static scene (background, walls, fiducials)
/// precomputed.
#[derive(Debug, Clone)]
pub struct CineRenderer {
    cfg: RenderConfig,
    proj: Projection,
    static_layer: Vec<f32>,
}

impl CineRenderer {
    pub fn new(geom: &WorldGeometry, cfg: RenderConfig) -> Result<Self, RenderError> {
        cfg.validate()?;
        let proj = cfg.projection();
        let static_layer = static_layer(geom, &cfg, &proj);
        Ok(Self {
            cfg,
            proj,
            static_layer,
        })
    }

    pub fn config(&self) -> &RenderConfig {
        &self.cfg
    }

    pub fn projection(&self) -> Projection {
        self.proj
    }

    /// Frame of the scene without the robot, as used for a calibration shot.
    pub fn render_scene(&self, t_us: u64, seq: u64) -> Frame {
        let buf = self.static_layer.clone();
        self.finish(buf, t_us, seq)
    }

    pub fn render(&self, state: &RobotState, t_us: u64, seq: u64) -> Result<Frame, RenderError> {
        let c = self.proj.to_px(state.position);
        let (w, h) = (self.cfg.width as f64, self.cfg.height as f64);
        if !(c.x >= -0.5 && c.y >= -0.5 && c.x < w - 0.5 && c.y < h - 0.5) {
            return Err(RenderError::PoseOutOfFrame {
                x_mm: state.position.x,
                y_mm: state.position.y,
                px: c.x,
                py: c.y,
            });
        }
        let mut buf = self.static_layer.clone();
        stamp_capsule(&mut buf, &self.cfg, &self.proj, state);
        Ok(self.finish(buf, t_us, seq))
    }

    fn finish(&self, mut buf: Vec<f32>, t_us: u64, seq: u64) -> Frame {
        let width = self.cfg.width;
        for ev in self.cfg.occlusion_events.iter().filter(|e| e.active_at(t_us)) {
            let r = ev.region;
            let x1 = (r.x + r.w).min(width);
            let y1 = (r.y + r.h).min(self.cfg.height);
            for y in r.y.min(y1)..y1 {
                for x in r.x.min(x1)..x1 {
                    buf[(y * width + x) as usize] += ev.level_shift as f32;
                }
            }
        }
        if self.cfg.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.noise_seed);
            rng.set_stream(seq);
            let normal = Normal::new(0.0f32, self.cfg.noise_sigma as f32).expect("sigma checked");
            for v in buf.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        let pixels = buf
            .into_iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        Frame::new(width, self.cfg.height, pixels, seq, t_us, FrameMode::Cine)
            .expect("buffer sized from config")
    }
}

/// One-shot cine render; builds the static layer on every call.
pub fn render_cine(
    geom: &WorldGeometry,
    state: &RobotState,
    cfg: &RenderConfig,
    t_us: u64,
    seq: u64,
) -> Result<Frame, RenderError> {
    CineRenderer::new(geom, cfg.clone())?.render(state, t_us, seq)
}

/// Digital subtraction: `clamp(128 + current - reference)`. Anything that
/// got darker than the reference reads below 128; a robot that left its
/// starting spot leaves a bright mark there.
pub fn render_ds(current: &Frame, reference: &Frame) -> Result<Frame, RenderError> {
    if current.dims() != reference.dims() {
        return Err(RenderError::DimensionMismatch(current.dims(), reference.dims()));
    }
    if current.mode != FrameMode::Cine || reference.mode != FrameMode::Cine {
        return Err(RenderError::NotCine);
    }
    let pixels = current
        .pixels()
        .iter()
        .zip(reference.pixels())
        .map(|(&c, &r)| (DS_ZERO as i16 + c as i16 - r as i16).clamp(0, 255) as u8)
        .collect();
    let (w, h) = current.dims();
    Ok(Frame::new(w, h, pixels, current.seq, current.t_mono_us, FrameMode::Ds)
        .expect("same dimensions as input"))
}

fn static_layer(geom: &WorldGeometry, cfg: &RenderConfig, proj: &Projection) -> Vec<f32> {
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let mut buf = vec![cfg.background_level as f32; w * h];
    let band_mm = 0.5 * cfg.mm_per_px;

    if cfg.wall_contrast > 0 {
        let channel_segs: Vec<(Segment, f64, f64)> =
            geom.channels.iter().flat_map(|c| c.segments()).collect();
        for j in 0..h {
            for i in 0..w {
                let p = proj.to_world(Vec2::new(i as f64, j as f64));
                let mut on_wall = false;
                if !channel_segs.is_empty() {
                    // signed distance to the union boundary, positive inside
                    let inside = channel_segs
                        .iter()
                        .map(|(s, wa, wb)| {
                            let t = s.project_param(p);
                            (wa + (wb - wa) * t) / 2.0 - s.point_at(t).distance(p)
                        })
                        .fold(f64::NEG_INFINITY, f64::max);
                    on_wall = inside.abs() <= band_mm;
                }
                if !on_wall {
                    on_wall = geom.walls.iter().any(|s| s.distance_to(p) <= band_mm);
                }
                if on_wall {
                    buf[j * w + i] -= cfg.wall_contrast as f32;
                }
            }
        }
    }

    if cfg.fiducial_attenuation > 0 && cfg.fiducial_radius_px > 0.0 {
        let r = cfg.fiducial_radius_px;
        for f in &geom.fiducials {
            let c = proj.to_px(*f);
            stamp_coverage(&mut buf, cfg, c, r + 1.0, cfg.fiducial_attenuation as f32, |p| {
                p.distance(c) <= r
            });
        }
    }
    buf
}

fn stamp_capsule(buf: &mut [f32], cfg: &RenderConfig, proj: &Projection, state: &RobotState) {
    let c = proj.to_px(state.position);
    let radius = state.body_width / 2.0 / cfg.mm_per_px;
    let half_len = ((state.body_length - state.body_width).max(0.0) / 2.0) / cfg.mm_per_px;
    // image y is flipped relative to world y
    let axis = Vec2::new(state.heading.cos(), -state.heading.sin()) * half_len;
    let spine = Segment::new(c - axis, c + axis);
    stamp_coverage(
        buf,
        cfg,
        c,
        half_len + radius + 1.0,
        cfg.robot_attenuation as f32,
        |p| spine.distance_to(p) <= radius,
    );
}

/// Subtracts `deficit * coverage` from every pixel within `reach` of
/// `center`, with coverage estimated on an 8x8 sub-pixel grid.
fn stamp_coverage(
    buf: &mut [f32],
    cfg: &RenderConfig,
    center: Vec2,
    reach: f64,
    deficit: f32,
    inside: impl Fn(Vec2) -> bool,
) {
    let (w, h) = (cfg.width as i64, cfg.height as i64);
    let x0 = ((center.x - reach).floor() as i64).max(0);
    let x1 = ((center.x + reach).ceil() as i64).min(w - 1);
    let y0 = ((center.y - reach).floor() as i64).max(0);
    let y1 = ((center.y + reach).ceil() as i64).min(h - 1);
    let n = SUPERSAMPLE;
    let step = 1.0 / n as f64;
    for j in y0..=y1 {
        for i in x0..=x1 {
            let mut hits = 0usize;
            for sy in 0..n {
                for sx in 0..n {
                    let p = Vec2::new(
                        i as f64 - 0.5 + (sx as f64 + 0.5) * step,
                        j as f64 - 0.5 + (sy as f64 + 0.5) * step,
                    );
                    hits += inside(p) as usize;
                }
            }
            if hits > 0 {
                let cov = hits as f32 / (n * n) as f32;
                buf[(j * w + i) as usize] -= deficit * cov;
            }
        }
    }
}

/// Paces cine rendering at `cfg.fps` against a clock. Frame timestamps are
/// taken from the clock when each tick fires.
pub struct FrameStream<C: Clock> {
    renderer: CineRenderer,
    clock: C,
    start_us: Option<u64>,
    next_seq: u64,
}

impl<C: Clock> FrameStream<C> {
    pub fn new(renderer: CineRenderer, clock: C) -> Self {
        Self {
            renderer,
            clock,
            start_us: None,
            next_seq: 0,
        }
    }

    pub fn renderer(&self) -> &CineRenderer {
        &self.renderer
    }

    /// Time of the next tick, µs on the stream's clock.
    pub fn next_tick_us(&self) -> u64 {
        match self.start_us {
            None => self.clock.now_us(),
            Some(s) => {
                s + (self.next_seq as f64 * self.renderer.cfg.frame_period_us()).round() as u64
            }
        }
    }

    pub fn next_frame(&mut self, state: &RobotState) -> Result<Frame, RenderError> {
        let tick = self.next_tick_us();
        self.start_us.get_or_insert(tick);
        self.clock.sleep_until(tick);
        let t = self.clock.now_us();
        let frame = self.renderer.render(state, t, self.next_seq)?;
        self.next_seq += 1;
        Ok(frame)
    }
}

/// Turns a cine stream into DS frames against its first frame.
#[derive(Debug, Default)]
pub struct DsConverter {
    reference: Option<Frame>,
}

impl DsConverter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn convert(&mut self, frame: &Frame) -> Result<Frame, RenderError> {
        let reference = self.reference.get_or_insert_with(|| frame.clone());
        render_ds(frame, reference)
    }
}
