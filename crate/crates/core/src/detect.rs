//! Deterministic swimmer detector: background subtraction, connected
//! components and deficit-weighted sub-pixel centroids. Produces the same
//! identifiers a learned detector would (bounding box, center, confidence).

use serde::{Deserialize, Serialize};

use crate::frame::{Frame, PixelRect};
use crate::geom::Vec2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DetectError {
    #[error("frame is {frame:?} but background is {background:?}")]
    DimensionMismatch {
        frame: (u32, u32),
        background: (u32, u32),
    },
    #[error("no background: detect called before any frame primed the model")]
    NoBackground,
    #[error("invalid detector params: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackgroundEstimator {
    /// The first frame seen stays the background for the whole stream.
    FirstFrame,
    /// Per-pixel median of the last `window` frames.
    RunningMedian { window: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    pub background: BackgroundEstimator,
    /// Minimum |frame - background| in gray levels for a pixel to count.
    pub contrast_threshold: f64,
    pub min_area: usize,
    pub max_area: usize,
    /// Mean deficit that maps to full confidence.
    pub confidence_deficit_scale: f64,
    /// Area that maps to full confidence; defaults to `min_area`.
    pub confidence_area_scale: Option<f64>,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            background: BackgroundEstimator::FirstFrame,
            contrast_threshold: 15.0,
            min_area: 6,
            max_area: 5_000,
            confidence_deficit_scale: 255.0,
            confidence_area_scale: None,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: &str| Err(DetectError::Params(m.into()));
        if !(self.contrast_threshold > 0.0) {
            return bad("contrast_threshold must be positive");
        }
        if self.min_area >= self.max_area {
            return bad("min_area must be below max_area");
        }
        if !(self.confidence_deficit_scale > 0.0) {
            return bad("confidence_deficit_scale must be positive");
        }
        if let BackgroundEstimator::RunningMedian { window } = self.background {
            if window == 0 {
                return bad("running median window must be at least 1");
            }
        }
        Ok(())
    }

    fn area_scale(&self) -> f64 {
        self.confidence_area_scale
            .unwrap_or(self.min_area.max(1) as f64)
    }

    /// `mean_deficit` is taken over the component's `min_area` strongest
    /// pixels.
    pub fn confidence(&self, mean_deficit: f64, area: usize) -> f64 {
        (mean_deficit / self.confidence_deficit_scale).clamp(0.0, 1.0)
            * (area as f64 / self.area_scale()).clamp(0.0, 1.0)
    }
}

/// One detection. Serializes as the `detection` topic record
/// `{seq, t_mono_us, bbox, centroid, confidence}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    #[serde(rename = "seq")]
    pub frame_seq: u64,
    pub t_mono_us: u64,
    pub bbox: PixelRect,
    pub centroid: Vec2,
    pub confidence: f64,
}

/// Per-stream background state.
#[derive(Debug, Clone)]
pub struct BackgroundModel {
    estimator: BackgroundEstimator,
    dims: Option<(u32, u32)>,
    background: Option<Vec<f32>>,
    // pixel-major history for the running median: history[pix * window + k]
    history: Vec<u8>,
    history_len: usize,
    history_head: usize,
}

impl BackgroundModel {
    pub fn new(estimator: BackgroundEstimator) -> Self {
        Self {
            estimator,
            dims: None,
            background: None,
            history: Vec::new(),
            history_len: 0,
            history_head: 0,
        }
    }

    pub fn is_primed(&self) -> bool {
        self.background.is_some()
    }

    pub fn dims(&self) -> Option<(u32, u32)> {
        self.dims
    }

    pub fn background(&self) -> Option<&[f32]> {
        self.background.as_deref()
    }

    /// Feeds a frame into the model. First-frame models only take the very
    /// first frame; running-median models take every frame.
    pub fn observe(&mut self, frame: &Frame) -> Result<(), DetectError> {
        if let Some(d) = self.dims {
            if d != frame.dims() {
                return Err(DetectError::DimensionMismatch {
                    frame: frame.dims(),
                    background: d,
                });
            }
        }
        self.dims = Some(frame.dims());
        match self.estimator {
            BackgroundEstimator::FirstFrame => {
                if self.background.is_none() {
                    self.background = Some(frame.pixels().iter().map(|&v| v as f32).collect());
                }
            }
            BackgroundEstimator::RunningMedian { window } => self.push_median(frame, window),
        }
        Ok(())
    }

    fn push_median(&mut self, frame: &Frame, window: usize) {
        let n = frame.pixels().len();
        if self.history.len() != n * window {
            self.history = vec![0; n * window];
            self.history_len = 0;
            self.history_head = 0;
        }
        let slot = self.history_head;
        for (i, &v) in frame.pixels().iter().enumerate() {
            self.history[i * window + slot] = v;
        }
        self.history_head = (slot + 1) % window;
        self.history_len = (self.history_len + 1).min(window);

        let len = self.history_len;
        let bg = self.background.get_or_insert_with(|| vec![0.0; n]);
        let mut scratch = vec![0u8; len];
        for (i, out) in bg.iter_mut().enumerate() {
            scratch.copy_from_slice(&self.history[i * window..i * window + len]);
            let (_, m, _) = scratch.select_nth_unstable(len / 2);
            *out = *m as f32;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Component {
    area: usize,
    min_x: u32,
    min_y: u32,
    max_x: u32,
    max_y: u32,
    sum_deficit: f64,
    sum_x: f64,
    sum_y: f64,
}

/// Runs one detection against the current background, then lets the
/// background model observe the frame.
///
/// Pixels at least `contrast_threshold` darker than the background are
/// grouped into 8-connected components; components within the area bounds
/// are candidates. Pixels brighter than the background (e.g. the residual
/// mark a robot leaves in DS mode) have negative deficit and never form
/// candidates.
pub fn detect(
    frame: &Frame,
    params: &DetectorParams,
    background: &mut BackgroundModel,
) -> Result<Option<Detection>, DetectError> {
    let bg = background.background().ok_or(DetectError::NoBackground)?;
    let bg_dims = background.dims().expect("dims set with background");
    if frame.dims() != bg_dims {
        return Err(DetectError::DimensionMismatch {
            frame: frame.dims(),
            background: bg_dims,
        });
    }
    let best = best_candidate(frame, bg, params);
    background.observe(frame)?;
    Ok(best.map(|(c, confidence)| Detection {
        frame_seq: frame.seq,
        t_mono_us: frame.t_mono_us,
        bbox: PixelRect::new(c.min_x, c.min_y, c.max_x - c.min_x + 1, c.max_y - c.min_y + 1),
        centroid: Vec2::new(c.sum_x / c.sum_deficit, c.sum_y / c.sum_deficit),
        confidence,
    }))
}

fn best_candidate(frame: &Frame, bg: &[f32], params: &DetectorParams) -> Option<(Component, f64)> {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let thr = params.contrast_threshold as f32;
    let deficit: Vec<f32> = bg
        .iter()
        .zip(frame.pixels())
        .map(|(&b, &v)| b - v as f32)
        .collect();
    let mut visited = vec![false; w * h];
    let mut stack = Vec::new();
    let mut member_deficits: Vec<f64> = Vec::new();
    let mut best: Option<(Component, f64)> = None;

    for start in 0..w * h {
        if visited[start] || deficit[start] < thr {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut c = Component {
            area: 0,
            min_x: u32::MAX,
            min_y: u32::MAX,
            max_x: 0,
            max_y: 0,
            sum_deficit: 0.0,
            sum_x: 0.0,
            sum_y: 0.0,
        };
        member_deficits.clear();
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            let d = deficit[idx] as f64;
            c.area += 1;
            c.min_x = c.min_x.min(x as u32);
            c.min_y = c.min_y.min(y as u32);
            c.max_x = c.max_x.max(x as u32);
            c.max_y = c.max_y.max(y as u32);
            c.sum_deficit += d;
            member_deficits.push(d);
            c.sum_x += d * x as f64;
            c.sum_y += d * y as f64;
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for ny in y0..=y1 {
                for nx in x0..=x1 {
                    let n = ny * w + nx;
                    if !visited[n] && deficit[n] >= thr {
                        visited[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        if c.area < params.min_area || c.area > params.max_area {
            continue;
        }
        let conf = params.confidence(strongest_mean(&mut member_deficits, params.min_area), c.area);
        let better = match &best {
            None => true,
            Some((b, bc)) => {
                conf > *bc || (conf == *bc && (c.min_y, c.min_x) < (b.min_y, b.min_x))
            }
        };
        if better {
            best = Some((c, conf));
        }
    }
    best
}

/// Mean of the `k` largest deficits. Pixels joining a component as contrast
/// rises sit near the threshold; averaging a fixed number of the strongest
/// pixels keeps confidence nondecreasing in contrast.
fn strongest_mean(deficits: &mut [f64], k: usize) -> f64 {
    let k = k.clamp(1, deficits.len());
    deficits.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    deficits[..k].iter().sum::<f64>() / k as f64
}

/// Stream-level detector: the first frame primes the background and yields
/// no detection.
#[derive(Debug, Clone)]
pub struct Detector {
    params: DetectorParams,
    background: BackgroundModel,
}

impl Detector {
    pub fn new(params: DetectorParams) -> Result<Self, DetectError> {
        params.validate()?;
        let background = BackgroundModel::new(params.background);
        Ok(Self { params, background })
    }

    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    /// Primes the background with an explicit reference frame, e.g. a shot
    /// of the empty phantom.
    pub fn prime(&mut self, reference: &Frame) -> Result<(), DetectError> {
        self.background.observe(reference)
    }

    pub fn process(&mut self, frame: &Frame) -> Result<Option<Detection>, DetectError> {
        if !self.background.is_primed() {
            self.background.observe(frame)?;
            return Ok(None);
        }
        detect(frame, &self.params, &mut self.background)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ContrastError {
    #[error("ROI {0:?} lies outside the {1}x{2} frame")]
    RoiOutside(PixelRect, u32, u32),
    #[error("degenerate reference: background mean {bg:.3} minus reference mean {reference:.3} is not positive")]
    DegenerateReference { bg: f64, reference: f64 },
}

/// Relative X-ray contrast of an object against a reference, both measured
/// as darkening below a background ROI:
/// `(mean(bg) - mean(obj)) / (mean(bg) - mean(ref))`.
pub fn relative_contrast(
    frame: &Frame,
    roi_obj: PixelRect,
    roi_ref: PixelRect,
    roi_bg: PixelRect,
) -> Result<f64, ContrastError> {
    let (w, h) = frame.dims();
    for r in [roi_obj, roi_ref, roi_bg] {
        if !r.fits_in(w, h) {
            return Err(ContrastError::RoiOutside(r, w, h));
        }
    }
    let bg = frame.mean_in(roi_bg);
    let reference = frame.mean_in(roi_ref);
    let denom = bg - reference;
    if !(denom > 0.0) {
        return Err(ContrastError::DegenerateReference { bg, reference });
    }
    Ok((bg - frame.mean_in(roi_obj)) / denom)
}
