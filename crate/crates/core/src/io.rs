//! Little-endian binary formats.
//!
//! * `LEVP`: a LiDAR frame (pose, timestamp, points with intensity and a
//!   dynamic flag).
//! * `LEVR`: a range map (range, intensity and occupancy channels).
//! * `LEVG`: a Gaussian set for the splat renderer.
//!
//! Readers work on byte slices so that errors can name the exact offset.

use std::fs;
use std::path::Path;

use crate::geom::{Point, Pose};
use crate::sensor::{LidarFrame, RangeMap};
use crate::splat::{Gaussian, GaussianSet};

pub const LEVP_MAGIC: [u8; 4] = *b"LEVP";
pub const LEVR_MAGIC: [u8; 4] = *b"LEVR";
pub const LEVG_MAGIC: [u8; 4] = *b"LEVG";
pub const FORMAT_VERSION: u32 = 1;

const LEVP_HEADER: usize = 4 + 4 + 16 * 8 + 8 + 8;
const LEVP_RECORD: usize = 4 * 4 + 1 + 3;
const LEVR_HEADER: usize = 4 + 4 + 4 + 4;
const LEVG_HEADER: usize = 4 + 4 + 8;
const LEVG_RECORD: usize = 4 * 12;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FormatError {
    fn at(offset: usize, message: impl Into<String>) -> Self {
        FormatError::Malformed {
            offset,
            message: message.into(),
        }
    }
}

/// Which binary format a buffer holds, by magic bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Frame,
    RangeMap,
    Gaussians,
}

pub fn detect_kind(bytes: &[u8]) -> Result<FileKind, FormatError> {
    match bytes.get(..4) {
        Some(m) if m == LEVP_MAGIC => Ok(FileKind::Frame),
        Some(m) if m == LEVR_MAGIC => Ok(FileKind::RangeMap),
        Some(m) if m == LEVG_MAGIC => Ok(FileKind::Gaussians),
        Some(m) => Err(FormatError::at(0, format!("unknown magic bytes {m:?}"))),
        None => Err(FormatError::at(0, "file shorter than the 4-byte magic")),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N], FormatError> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| {
            FormatError::at(
                self.pos,
                format!(
                    "unexpected end of file reading {what} ({} bytes total)",
                    self.bytes.len()
                ),
            )
        })?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length is N"))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let m = self.take::<4>("magic")?;
        if m != expected {
            return Err(FormatError::at(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&m),
                    String::from_utf8_lossy(&expected)
                ),
            ));
        }
        let at = self.pos;
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(FormatError::at(
                at,
                format!("unsupported version {version}"),
            ));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take::<1>(what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(what)?))
    }

    fn i64(&mut self, what: &str) -> Result<i64, FormatError> {
        Ok(i64::from_le_bytes(self.take(what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32, FormatError> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.take(what)?);
        if !v.is_finite() {
            return Err(FormatError::at(at, format!("non-finite {what}")));
        }
        Ok(v)
    }

    fn f64(&mut self, what: &str) -> Result<f64, FormatError> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(what)?);
        if !v.is_finite() {
            return Err(FormatError::at(at, format!("non-finite {what}")));
        }
        Ok(v)
    }

    /// Checks the declared payload fits before allocating for it.
    fn expect_remaining(&self, needed: u128, what: &str) -> Result<(), FormatError> {
        let remaining = (self.bytes.len() - self.pos) as u128;
        if needed > remaining {
            return Err(FormatError::at(
                self.pos,
                format!("{what} needs {needed} bytes but only {remaining} remain"),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::at(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn encode_levp(frame: &LidarFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(LEVP_HEADER + frame.len() * LEVP_RECORD);
    out.extend_from_slice(&LEVP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in frame.pose.to_row_major() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&frame.timestamp.to_le_bytes());
    out.extend_from_slice(&(frame.len() as u64).to_le_bytes());
    for ((p, &i), &d) in frame
        .points()
        .iter()
        .zip(frame.intensities())
        .zip(frame.dynamic_flags())
    {
        for v in [p.x as f32, p.y as f32, p.z as f32, i as f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&[d as u8, 0, 0, 0]);
    }
    out
}

pub fn decode_levp(bytes: &[u8]) -> Result<LidarFrame, FormatError> {
    let mut c = Cursor::new(bytes);
    c.magic(LEVP_MAGIC)?;
    let pose_at = c.pos;
    let mut m = [0.0; 16];
    for v in m.iter_mut() {
        *v = c.f64("pose entry")?;
    }
    let pose = Pose::try_from_row_major(&m).map_err(|e| FormatError::at(pose_at, e.to_string()))?;
    let timestamp = c.i64("timestamp")?;
    let n = c.u64("point count")?;
    c.expect_remaining(n as u128 * LEVP_RECORD as u128, "point records")?;
    let n = n as usize;
    let mut points = Vec::with_capacity(n);
    let mut intensities = Vec::with_capacity(n);
    let mut dynamic = Vec::with_capacity(n);
    for _ in 0..n {
        let x = c.f32("x")?;
        let y = c.f32("y")?;
        let z = c.f32("z")?;
        let at = c.pos;
        let i = c.f32("intensity")?;
        if !(0.0..=1.0).contains(&i) {
            return Err(FormatError::at(at, format!("intensity {i} outside [0, 1]")));
        }
        let at = c.pos;
        let d = c.u8("dynamic flag")?;
        if d > 1 {
            return Err(FormatError::at(
                at,
                format!("dynamic flag {d} is not 0 or 1"),
            ));
        }
        c.take::<3>("padding")?;
        points.push(Point::new(x as f64, y as f64, z as f64));
        intensities.push(i as f64);
        dynamic.push(d == 1);
    }
    c.finish()?;
    LidarFrame::new(points, intensities, dynamic, pose, timestamp)
        .map_err(|e| FormatError::at(LEVP_HEADER, e.to_string()))
}

pub fn encode_levr(map: &RangeMap) -> Vec<u8> {
    let n = map.len();
    let mut out = Vec::with_capacity(LEVR_HEADER + n * 9);
    out.extend_from_slice(&LEVR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for &r in map.ranges() {
        out.extend_from_slice(&(r as f32).to_le_bytes());
    }
    for &i in map.intensities() {
        out.extend_from_slice(&(i as f32).to_le_bytes());
    }
    out.extend(map.occupancy().iter().map(|&o| o as u8));
    out
}

pub fn decode_levr(bytes: &[u8]) -> Result<RangeMap, FormatError> {
    let mut c = Cursor::new(bytes);
    c.magic(LEVR_MAGIC)?;
    let h = c.u32("height")? as usize;
    let w = c.u32("width")? as usize;
    let n = h as u128 * w as u128;
    c.expect_remaining(n * 9, "range map channels")?;
    let n = n as usize;
    let ranges_at = c.pos;
    let mut range = Vec::with_capacity(n);
    for _ in 0..n {
        range.push(c.f32("range")? as f64);
    }
    let mut intensity = Vec::with_capacity(n);
    for _ in 0..n {
        intensity.push(c.f32("intensity")? as f64);
    }
    let occ_at = c.pos;
    let mut occupancy = Vec::with_capacity(n);
    for _ in 0..n {
        let at = c.pos;
        match c.u8("occupancy")? {
            0 => occupancy.push(false),
            1 => occupancy.push(true),
            v => {
                return Err(FormatError::at(
                    at,
                    format!("occupancy byte {v} is not 0 or 1"),
                ))
            }
        }
    }
    c.finish()?;
    RangeMap::from_channels(h, w, range, intensity, occupancy).map_err(|e| {
        let offset = match e {
            crate::sensor::SensorError::InvalidRangeMap { cell, .. } => occ_at + cell,
            _ => ranges_at,
        };
        FormatError::at(offset, e.to_string())
    })
}

pub fn encode_levg(set: &GaussianSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(LEVG_HEADER + set.len() * LEVG_RECORD);
    out.extend_from_slice(&LEVG_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for g in set.iter() {
        let vals = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            g.scale.x,
            g.scale.y,
            g.scale.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.opacity,
            g.feature,
        ];
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_levg(bytes: &[u8]) -> Result<GaussianSet, FormatError> {
    let mut c = Cursor::new(bytes);
    c.magic(LEVG_MAGIC)?;
    let n = c.u64("gaussian count")?;
    c.expect_remaining(n as u128 * LEVG_RECORD as u128, "gaussian records")?;
    let mut gaussians = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let at = c.pos;
        let mut v = [0.0f64; 12];
        for x in v.iter_mut() {
            *x = c.f32("gaussian field")? as f64;
        }
        let g = Gaussian {
            mean: Point::new(v[0], v[1], v[2]),
            scale: Point::new(v[3], v[4], v[5]),
            rotation: [v[6], v[7], v[8], v[9]],
            opacity: v[10],
            feature: v[11],
        };
        g.validate(crate::splat::F32_QUAT_TOLERANCE)
            .map_err(|e| FormatError::at(at, e.to_string()))?;
        gaussians.push(g);
    }
    c.finish()?;
    Ok(GaussianSet::from_vec_unchecked(gaussians))
}

/// Reads a whole file, keeping the error type uniform.
pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    Ok(fs::read(path)?)
}

pub fn read_levp(path: &Path) -> Result<LidarFrame, FormatError> {
    decode_levp(&read_file(path)?)
}

pub fn read_levr(path: &Path) -> Result<RangeMap, FormatError> {
    decode_levr(&read_file(path)?)
}

pub fn read_levg(path: &Path) -> Result<GaussianSet, FormatError> {
    decode_levg(&read_file(path)?)
}

pub fn write_levp(path: &Path, frame: &LidarFrame) -> std::io::Result<()> {
    fs::write(path, encode_levp(frame))
}

pub fn write_levr(path: &Path, map: &RangeMap) -> std::io::Result<()> {
    fs::write(path, encode_levr(map))
}

pub fn write_levg(path: &Path, set: &GaussianSet) -> std::io::Result<()> {
    fs::write(path, encode_levg(set))
}

/// Whitespace-separated `x y z intensity` lines for point-cloud viewers.
pub fn encode_ascii(points: &[Point], intensities: &[f64]) -> String {
    let mut s = String::with_capacity(points.len() * 40);
    for (p, i) in points.iter().zip(intensities) {
        s.push_str(&format!(
            "{} {} {} {}\n",
            p.x as f32, p.y as f32, p.z as f32, *i as f32
        ));
    }
    s
}
