//! Binary PGM (P5, maxval 255) encoding and the recorded-replay directory
//! layout: `frame_%06d.pgm` files plus `manifest.json`.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::frame::{Frame, FrameMode};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum PgmError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a binary PGM: {0}")]
    Format(String),
    #[error("unsupported maxval {0}, only 255 is supported")]
    MaxVal(u32),
    #[error("manifest error: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PgmError + '_ {
    move |source| PgmError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", frame.width(), frame.height());
    let mut out = Vec::with_capacity(header.len() + frame.pixels().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(frame.pixels());
    out
}

/// Decodes a P5 image. Comments (`#` to end of line) are allowed between
/// header tokens. Timestamp, sequence and mode are left at defaults.
pub fn decode(data: &[u8]) -> Result<Frame, PgmError> {
    let mut pos = 0usize;
    let mut token = || -> Result<&[u8], PgmError> {
        loop {
            match data.get(pos) {
                Some(b'#') => {
                    while pos < data.len() && data[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(PgmError::Format("truncated header".into())),
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(&data[start..pos])
    };
    if token()? != b"P5" {
        return Err(PgmError::Format("missing P5 magic".into()));
    }
    let mut number = |what: &str| -> Result<u32, PgmError> {
        let t = token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::Format(format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(PgmError::MaxVal(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = width as usize * height as usize;
    let raster = data
        .get(pos..pos + len)
        .ok_or_else(|| PgmError::Format("truncated raster".into()))?;
    Frame::new(width, height, raster.to_vec(), 0, 0, FrameMode::Cine)
        .map_err(|e| PgmError::Format(e.to_string()))
}

pub fn write_file(path: &Path, frame: &Frame) -> Result<(), PgmError> {
    fs::write(path, encode(frame)).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<Frame, PgmError> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

pub fn frame_file_name(seq: u64) -> String {
    format!("frame_{seq:06}.pgm")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seq: u64,
    pub t_mono_us: u64,
    pub mode: FrameMode,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub width: u32,
    pub height: u32,
    pub frames: Vec<ManifestEntry>,
}

/// Writes frames into a replay directory; the manifest is written on
/// `finish`.
pub struct Recorder {
    dir: PathBuf,
    manifest: Manifest,
}

impl Recorder {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self, PgmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self {
            dir,
            manifest: Manifest::default(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn push(&mut self, frame: &Frame) -> Result<(), PgmError> {
        if self.manifest.frames.is_empty() {
            self.manifest.width = frame.width();
            self.manifest.height = frame.height();
        } else if (self.manifest.width, self.manifest.height) != frame.dims() {
            return Err(PgmError::Manifest("frame size changed mid-recording".into()));
        }
        if let Some(last) = self.manifest.frames.last() {
            if frame.seq <= last.seq {
                return Err(PgmError::Manifest(format!(
                    "seq {} not after {}",
                    frame.seq, last.seq
                )));
            }
        }
        let file = frame_file_name(frame.seq);
        write_file(&self.dir.join(&file), frame)?;
        self.manifest.frames.push(ManifestEntry {
            seq: frame.seq,
            t_mono_us: frame.t_mono_us,
            mode: frame.mode,
            file,
        });
        Ok(())
    }

    pub fn finish(self) -> Result<Manifest, PgmError> {
        let path = self.dir.join(MANIFEST_FILE);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.manifest)
            .map_err(|e| PgmError::Manifest(e.to_string()))?;
        w.write_all(b"\n").map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        Ok(self.manifest)
    }
}

/// A replay directory opened for reading.
#[derive(Debug, Clone)]
pub struct Replay {
    dir: PathBuf,
    pub manifest: Manifest,
}

impl Replay {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, PgmError> {
        let dir = dir.into();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| PgmError::Manifest(e.to_string()))?;
        Ok(Self { dir, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<Frame, PgmError>> + '_ {
        self.manifest.frames.iter().map(|e| {
            let mut f = read_file(&self.dir.join(&e.file))?;
            if f.dims() != (self.manifest.width, self.manifest.height) {
                return Err(PgmError::Manifest(format!("{} has wrong size", e.file)));
            }
            f.seq = e.seq;
            f.t_mono_us = e.t_mono_us;
            f.mode = e.mode;
            Ok(f)
        })
    }
}
