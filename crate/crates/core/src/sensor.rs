//! LiDAR frames, sensor intrinsics and range maps.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{spherical_unchecked, Point, Pose, SphericalPoint};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SensorError {
    #[error("invalid sensor model: {0}")]
    InvalidModel(String),
    #[error("frame arrays differ in length: {points} points, {intensities} intensities, {flags} dynamic flags")]
    LengthMismatch {
        points: usize,
        intensities: usize,
        flags: usize,
    },
    #[error("intensity {value} at index {index} is outside [0, 1]")]
    IntensityOutOfRange { index: usize, value: f64 },
    #[error("range map invariant violated at cell {cell}: {reason}")]
    InvalidRangeMap { cell: usize, reason: &'static str },
}

/// One timestamped scan in its own sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarFrame {
    points: Vec<Point>,
    intensities: Vec<f64>,
    dynamic: Vec<bool>,
    pub pose: Pose,
    /// Microseconds.
    pub timestamp: i64,
}

impl LidarFrame {
    pub fn new(
        points: Vec<Point>,
        intensities: Vec<f64>,
        dynamic: Vec<bool>,
        pose: Pose,
        timestamp: i64,
    ) -> Result<Self, SensorError> {
        if points.len() != intensities.len() || points.len() != dynamic.len() {
            return Err(SensorError::LengthMismatch {
                points: points.len(),
                intensities: intensities.len(),
                flags: dynamic.len(),
            });
        }
        if let Some((index, &value)) = intensities
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(SensorError::IntensityOutOfRange { index, value });
        }
        Ok(Self {
            points,
            intensities,
            dynamic,
            pose,
            timestamp,
        })
    }

    /// A frame with every point flagged static.
    pub fn new_static(
        points: Vec<Point>,
        intensities: Vec<f64>,
        pose: Pose,
        timestamp: i64,
    ) -> Result<Self, SensorError> {
        let n = points.len();
        Self::new(points, intensities, vec![false; n], pose, timestamp)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn dynamic_flags(&self) -> &[bool] {
        &self.dynamic
    }
}

/// JSON form of a [`SensorModel`]; angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModelJson {
    pub height: usize,
    pub width: usize,
    pub azimuth_fov_deg: [f64; 2],
    pub elevation_fov_deg: [f64; 2],
    pub max_range_m: f64,
}

/// Range-map intrinsics. Angles are stored in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorModel {
    height: usize,
    width: usize,
    azimuth_fov: [f64; 2],
    elevation_fov: [f64; 2],
    max_range: f64,
}

impl SensorModel {
    pub fn new(
        height: usize,
        width: usize,
        azimuth_fov: [f64; 2],
        elevation_fov: [f64; 2],
        max_range: f64,
    ) -> Result<Self, SensorError> {
        let bad = |msg: String| Err(SensorError::InvalidModel(msg));
        if height == 0 || width == 0 {
            return bad(format!("range map must be non-empty, got {height}x{width}"));
        }
        if height
            .checked_mul(width)
            .is_none_or(|n| n > u32::MAX as usize)
        {
            return bad(format!("range map {height}x{width} is too large"));
        }
        let finite = azimuth_fov
            .iter()
            .chain(elevation_fov.iter())
            .chain(std::iter::once(&max_range))
            .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite field".into());
        }
        if azimuth_fov[0] >= azimuth_fov[1] {
            return bad(format!("azimuth fov {azimuth_fov:?} must have min < max"));
        }
        if azimuth_fov[1] - azimuth_fov[0] > TAU + 1e-9 {
            return bad(format!(
                "azimuth fov {azimuth_fov:?} spans more than a full turn"
            ));
        }
        if elevation_fov[0] >= elevation_fov[1] {
            return bad(format!(
                "elevation fov {elevation_fov:?} must have min < max"
            ));
        }
        if elevation_fov[0] < -std::f64::consts::FRAC_PI_2 - 1e-12
            || elevation_fov[1] > std::f64::consts::FRAC_PI_2 + 1e-12
        {
            return bad(format!("elevation fov {elevation_fov:?} exceeds ±90°"));
        }
        if max_range <= 0.0 {
            return bad(format!("max range must be positive, got {max_range}"));
        }
        Ok(Self {
            height,
            width,
            azimuth_fov,
            elevation_fov,
            max_range,
        })
    }

    /// 32-beam spinning sensor at 32×1088 with a 200 m cutoff.
    pub fn nuscenes_32() -> Self {
        Self::from_json(&SensorModelJson {
            height: 32,
            width: 1088,
            azimuth_fov_deg: [-180.0, 180.0],
            elevation_fov_deg: [-30.67, 10.67],
            max_range_m: 200.0,
        })
        .expect("built-in sensor model is valid")
    }

    pub fn from_json(j: &SensorModelJson) -> Result<Self, SensorError> {
        Self::new(
            j.height,
            j.width,
            j.azimuth_fov_deg.map(f64::to_radians),
            j.elevation_fov_deg.map(f64::to_radians),
            j.max_range_m,
        )
    }

    pub fn to_json(&self) -> SensorModelJson {
        SensorModelJson {
            height: self.height,
            width: self.width,
            azimuth_fov_deg: self.azimuth_fov.map(f64::to_degrees),
            elevation_fov_deg: self.elevation_fov.map(f64::to_degrees),
            max_range_m: self.max_range,
        }
    }

    /// Same intrinsics with a different raster size.
    pub fn with_size(&self, height: usize, width: usize) -> Result<Self, SensorError> {
        Self::new(
            height,
            width,
            self.azimuth_fov,
            self.elevation_fov,
            self.max_range,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cell_count(&self) -> usize {
        self.height * self.width
    }

    pub fn azimuth_fov(&self) -> [f64; 2] {
        self.azimuth_fov
    }

    pub fn elevation_fov(&self) -> [f64; 2] {
        self.elevation_fov
    }

    pub fn max_range(&self) -> f64 {
        self.max_range
    }

    /// True when the azimuth field of view closes on itself, in which case
    /// columns wrap modulo the width.
    pub fn is_full_circle(&self) -> bool {
        self.azimuth_fov[1] - self.azimuth_fov[0] >= TAU - 1e-9
    }

    /// Radians per column.
    pub fn azimuth_step(&self) -> f64 {
        (self.azimuth_fov[1] - self.azimuth_fov[0]) / self.width as f64
    }

    /// Radians per row.
    pub fn elevation_step(&self) -> f64 {
        (self.elevation_fov[1] - self.elevation_fov[0]) / self.height as f64
    }

    /// Direction of the center of a cell. Centers sit at integer continuous
    /// coordinates, matching the rounding in [`project_to_cell`].
    pub fn cell_center(&self, cell: Cell) -> (f64, f64) {
        let az =
            crate::geom::wrap_angle(self.azimuth_fov[0] + cell.col as f64 * self.azimuth_step());
        let el = self.elevation_fov[0] + cell.row as f64 * self.elevation_step();
        (az, el)
    }
}

/// Row/column address in a range map. Row 0 is the lowest elevation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn index(&self, width: usize) -> usize {
        self.row * width + self.col
    }
}

#[inline]
fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Continuous range-map coordinates, then round-half-up to a cell.
///
/// Returns `None` (out of field of view) when the continuous coordinate falls
/// outside `[0, h) × [0, w)` or the rounded row/column lands past the last
/// cell. Full-circle sensors wrap the column instead.
pub fn project_to_cell(s: &SphericalPoint, m: &SensorModel) -> Option<Cell> {
    let [el_min, el_max] = m.elevation_fov;
    let v = (s.elevation - el_min) * m.height as f64 / (el_max - el_min);
    if !(v >= 0.0 && v < m.height as f64) {
        return None;
    }
    let row = round_half_up(v) as usize;
    if row >= m.height {
        return None;
    }

    let [az_min, az_max] = m.azimuth_fov;
    let w = m.width as f64;
    let offset = (s.azimuth - az_min).rem_euclid(TAU);
    let u = offset * w / (az_max - az_min);
    let col = if m.is_full_circle() {
        let c = round_half_up(u.rem_euclid(w)) as usize;
        c % m.width
    } else {
        if !(u >= 0.0 && u < w) {
            return None;
        }
        let c = round_half_up(u) as usize;
        if c >= m.width {
            return None;
        }
        c
    };
    Some(Cell { row, col })
}

/// Marker for "no point" in a per-cell winner table.
pub const NO_HIT: u32 = u32::MAX;

/// Per-point cell address and range after the visibility filter
/// (range in `(0, max_range]`, inside the field of view).
pub(crate) fn project_points(points: &[Point], m: &SensorModel) -> Vec<Option<(u32, f64)>> {
    let max_range = m.max_range;
    let w = m.width;
    points
        .par_iter()
        .with_min_len(4096)
        .map(|p| {
            let s = spherical_unchecked(p);
            if !(s.range > 0.0 && s.range <= max_range) {
                return None;
            }
            project_to_cell(&s, m).map(|c| (c.index(w) as u32, s.range))
        })
        .collect()
}

/// Nearest hit per cell. The winner of a cell is the point with the smallest
/// range, ties going to the lowest input index, so the result does not depend
/// on evaluation order. Returns the winning point index per cell or
/// [`NO_HIT`], plus the projected ranges for reuse.
pub fn nearest_hits(points: &[Point], m: &SensorModel) -> (Vec<u32>, Vec<Option<(u32, f64)>>) {
    assert!(
        points.len() < NO_HIT as usize,
        "point count exceeds the u32 index space"
    );
    let projected = project_points(points, m);
    let mut winner = vec![NO_HIT; m.cell_count()];
    let mut best = vec![f64::INFINITY; m.cell_count()];
    // Ascending index order with a strict comparison keeps the lowest index
    // on equal ranges.
    for (i, hit) in projected.iter().enumerate() {
        if let Some((cell, range)) = *hit {
            let c = cell as usize;
            if range < best[c] {
                best[c] = range;
                winner[c] = i as u32;
            }
        }
    }
    (winner, projected)
}

/// A rasterized scan: per-cell range, intensity and occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeMap {
    height: usize,
    width: usize,
    range: Vec<f64>,
    intensity: Vec<f64>,
    occupancy: Vec<bool>,
}

/// Range value stored in empty cells.
pub const EMPTY_RANGE: f64 = -1.0;

impl RangeMap {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            range: vec![EMPTY_RANGE; n],
            intensity: vec![0.0; n],
            occupancy: vec![false; n],
        }
    }

    /// Assembles a map from raw channels, checking the occupancy/sentinel
    /// coupling and intensity bounds.
    pub fn from_channels(
        height: usize,
        width: usize,
        range: Vec<f64>,
        intensity: Vec<f64>,
        occupancy: Vec<bool>,
    ) -> Result<Self, SensorError> {
        let n = height * width;
        if range.len() != n || intensity.len() != n || occupancy.len() != n {
            return Err(SensorError::InvalidRangeMap {
                cell: 0,
                reason: "channel length differs from height*width",
            });
        }
        for cell in 0..n {
            let (r, i, o) = (range[cell], intensity[cell], occupancy[cell]);
            if o {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(SensorError::InvalidRangeMap {
                        cell,
                        reason: "occupied cell must have a positive finite range",
                    });
                }
                if !(0.0..=1.0).contains(&i) {
                    return Err(SensorError::InvalidRangeMap {
                        cell,
                        reason: "intensity outside [0, 1]",
                    });
                }
            } else if r != EMPTY_RANGE || i != 0.0 {
                return Err(SensorError::InvalidRangeMap {
                    cell,
                    reason: "empty cell must have range -1 and intensity 0",
                });
            }
        }
        Ok(Self {
            height,
            width,
            range,
            intensity,
            occupancy,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn ranges(&self) -> &[f64] {
        &self.range
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensity
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn get(&self, cell: Cell) -> Option<(f64, f64)> {
        let i = cell.index(self.width);
        self.occupancy[i].then(|| (self.range[i], self.intensity[i]))
    }

    pub(crate) fn set(&mut self, index: usize, range: f64, intensity: f64) {
        self.range[index] = range;
        self.intensity[index] = intensity;
        self.occupancy[index] = true;
    }

    /// Back-projects every occupied cell center to a sensor-frame point.
    pub fn to_points(&self, m: &SensorModel) -> Vec<Point> {
        let mut out = Vec::with_capacity(self.occupied_count());
        for row in 0..self.height {
            for col in 0..self.width {
                let cell = Cell::new(row, col);
                if let Some((r, _)) = self.get(cell) {
                    let (az, el) = m.cell_center(cell);
                    out.push(crate::geom::from_spherical(&SphericalPoint::new(az, el, r)));
                }
            }
        }
        out
    }
}

/// Nearest-hit rasterization of sensor-frame points.
pub fn rasterize(points: &[Point], intensities: &[f64], m: &SensorModel) -> RangeMap {
    assert_eq!(points.len(), intensities.len());
    let (winner, projected) = nearest_hits(points, m);
    let mut map = RangeMap::empty(m.height, m.width);
    for (cell, &w) in winner.iter().enumerate() {
        if w != NO_HIT {
            let (_, range) = projected[w as usize].expect("winner was projected");
            map.set(cell, range, intensities[w as usize]);
        }
    }
    map
}

pub fn rasterize_frame(frame: &LidarFrame, m: &SensorModel) -> RangeMap {
    rasterize(frame.points(), frame.intensities(), m)
}
