use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    /// Raw cinefluorography frame.
    Cine,
    /// Digital subtraction against a reference frame, centered on 128.
    Ds,
}

impl std::fmt::Display for FrameMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrameMode::Cine => "cine",
            FrameMode::Ds => "ds",
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("pixel buffer holds {len} bytes, expected {width}x{height}")]
pub struct FrameSizeError {
    pub width: u32,
    pub height: u32,
    pub len: usize,
}

/// Timestamped 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    pub seq: u64,
    pub t_mono_us: u64,
    pub mode: FrameMode,
}

impl Frame {
    pub fn new(
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        seq: u64,
        t_mono_us: u64,
        mode: FrameMode,
    ) -> Result<Self, FrameSizeError> {
        if pixels.len() != width as usize * height as usize {
            return Err(FrameSizeError {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            seq,
            t_mono_us,
            mode,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
            seq: 0,
            t_mono_us: 0,
            mode: FrameMode::Cine,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    /// Mean intensity over `rect`, which must lie inside the frame.
    pub fn mean_in(&self, rect: PixelRect) -> f64 {
        let mut sum = 0u64;
        for y in rect.y..rect.y + rect.h {
            let row = &self.pixels[(y * self.width) as usize..][..self.width as usize];
            sum += row[rect.x as usize..(rect.x + rect.w) as usize]
                .iter()
                .map(|&v| v as u64)
                .sum::<u64>();
        }
        sum as f64 / rect.area() as f64
    }
}

/// Integer pixel rectangle `(x, y, w, h)`; serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64
            && y >= self.y as f64
            && x <= (self.x + self.w - 1) as f64
            && y <= (self.y + self.h - 1) as f64
    }

    pub fn intersects(&self, other: &PixelRect) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

impl From<[u32; 4]> for PixelRect {
    fn from(v: [u32; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PixelRect> for [u32; 4] {
    fn from(r: PixelRect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        let err = Frame::new(3, 3, vec![0; 8], 0, 0, FrameMode::Cine).unwrap_err();
        assert_eq!(err.len, 8);
    }

    #[test]
    fn mean_in_rect() {
        let mut f = Frame::filled(4, 4, 10);
        f.set(1, 1, 50);
        assert_eq!(f.mean_in(PixelRect::new(1, 1, 2, 2)), 20.0);
    }
}
