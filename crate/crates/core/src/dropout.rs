//! Spatially constrained dropout.
//!
//! Gaussians near the sensor and inside its elevation band form the region
//! of interest (ROI). During training each ROI Gaussian is dropped
//! independently with probability `r`; at inference the same Gaussians keep
//! their place but their opacity is scaled by the retention probability
//! `1 − r`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{Point, Pose};
use crate::rng::CounterStream;
use crate::sensor::SensorModel;
use crate::splat::GaussianSet;

/// Default dropout rate.
pub const DEFAULT_DROP_RATE: f64 = 0.5;
/// Default ROI distance cutoff in meters.
pub const DEFAULT_D_MAX: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DropoutError {
    #[error("invalid ROI spec: {0}")]
    InvalidSpec(String),
    #[error("mask covers {mask} gaussians but the set has {set}")]
    LengthMismatch { mask: usize, set: usize },
    #[error("malformed mask byte {value} at offset {offset}")]
    MalformedMask { offset: usize, value: u8 },
}

/// Region-of-interest bounds and dropout rate. Elevations in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub d_max: f64,
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub drop_rate: f64,
}

impl RoiSpec {
    pub fn new(
        d_max: f64,
        elevation_min: f64,
        elevation_max: f64,
        drop_rate: f64,
    ) -> Result<Self, DropoutError> {
        let spec = Self {
            d_max,
            elevation_min,
            elevation_max,
            drop_rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Elevation band from the sensor's field of view, 200 m cutoff, rate 0.5.
    pub fn for_sensor(m: &SensorModel) -> Self {
        let [lo, hi] = m.elevation_fov();
        Self {
            d_max: DEFAULT_D_MAX,
            elevation_min: lo,
            elevation_max: hi,
            drop_rate: DEFAULT_DROP_RATE,
        }
    }

    pub fn with_rate(self, drop_rate: f64) -> Result<Self, DropoutError> {
        Self::new(
            self.d_max,
            self.elevation_min,
            self.elevation_max,
            drop_rate,
        )
    }

    pub fn validate(&self) -> Result<(), DropoutError> {
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(DropoutError::InvalidSpec(format!(
                "drop rate {} outside [0, 1)",
                self.drop_rate
            )));
        }
        if !(self.elevation_min < self.elevation_max) {
            return Err(DropoutError::InvalidSpec(format!(
                "elevation bounds [{}, {}) are empty",
                self.elevation_min, self.elevation_max
            )));
        }
        if !(self.d_max > 0.0) {
            return Err(DropoutError::InvalidSpec(format!(
                "d_max {} must be positive",
                self.d_max
            )));
        }
        Ok(())
    }
}

/// Per-Gaussian ROI membership: `d ≤ d_max ∧ φ_min ≤ φ < φ_max`, where `d`
/// is the distance from the sensor and `φ` the elevation of the view vector
/// expressed in the sensor frame. A Gaussian at the sensor origin gets
/// `φ = 0`.
pub fn roi_mask(means: &[Point], sensor: &Pose, spec: &RoiSpec) -> Vec<bool> {
    let rt = sensor.rotation().transpose();
    let origin = sensor.translation();
    means
        .par_iter()
        .with_min_len(4096)
        .map(|mu| {
            let v = mu - origin;
            let d = v.norm();
            let phi = if d > 0.0 {
                ((rt * v).z / d).clamp(-1.0, 1.0).asin()
            } else {
                0.0
            };
            d <= spec.d_max && spec.elevation_min <= phi && phi < spec.elevation_max
        })
        .collect()
}

/// A sampled dropout mask. `drop[i]` implies `roi[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask {
    pub roi: Vec<bool>,
    pub drop: Vec<bool>,
    pub seed: u64,
}

impl DropoutMask {
    pub fn len(&self) -> usize {
        self.roi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roi.is_empty()
    }

    pub fn dropped(&self) -> usize {
        self.drop.iter().filter(|&&d| d).count()
    }

    /// One byte per Gaussian: bit 0 is ROI membership, bit 1 is dropped.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.roi
            .iter()
            .zip(&self.drop)
            .map(|(&r, &d)| r as u8 | (d as u8) << 1)
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], seed: u64) -> Result<Self, DropoutError> {
        let mut roi = Vec::with_capacity(bytes.len());
        let mut drop = Vec::with_capacity(bytes.len());
        for (offset, &value) in bytes.iter().enumerate() {
            // 0b10 would be a drop outside the ROI.
            if value > 3 || value == 2 {
                return Err(DropoutError::MalformedMask { offset, value });
            }
            roi.push(value & 1 == 1);
            drop.push(value & 2 == 2);
        }
        Ok(Self { roi, drop, seed })
    }
}

/// Sidecar describing a mask file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskHeader {
    pub count: usize,
    pub seed: u64,
    pub rate: f64,
    pub spec: RoiSpec,
    pub dropped: usize,
    pub roi_count: usize,
    /// Describes the byte layout for external readers.
    pub encoding: String,
}

impl MaskHeader {
    pub fn new(mask: &DropoutMask, spec: &RoiSpec) -> Self {
        Self {
            count: mask.len(),
            seed: mask.seed,
            rate: spec.drop_rate,
            spec: *spec,
            dropped: mask.dropped(),
            roi_count: mask.roi.iter().filter(|&&r| r).count(),
            encoding: "u8 per gaussian; bit0 = roi, bit1 = dropped".into(),
        }
    }
}

/// Draws `u_i` for every ROI Gaussian from a stream keyed by `seed` and
/// indexed by Gaussian id; Gaussian `i` is dropped when `u_i < rate`.
pub fn sample_mask(roi: &[bool], rate: f64, seed: u64) -> DropoutMask {
    debug_assert!((0.0..1.0).contains(&rate));
    let stream = CounterStream::new(seed);
    let drop = roi
        .par_iter()
        .enumerate()
        .with_min_len(4096)
        .map(|(i, &in_roi)| in_roi && stream.uniform_at(i as u64) < rate)
        .collect();
    DropoutMask {
        roi: roi.to_vec(),
        drop,
        seed,
    }
}

/// `õ = o · (1 − rate)` inside the ROI, untouched outside.
pub fn compensate_opacity(opacities: &[f64], roi: &[bool], rate: f64) -> Vec<f64> {
    assert_eq!(opacities.len(), roi.len());
    let keep = 1.0 - rate;
    opacities
        .iter()
        .zip(roi)
        .map(|(&o, &r)| if r { o * keep } else { o })
        .collect()
}

/// The surviving subset (`drop == false`), attributes untouched.
pub fn apply_mask(set: &GaussianSet, mask: &DropoutMask) -> Result<GaussianSet, DropoutError> {
    if mask.len() != set.len() {
        return Err(DropoutError::LengthMismatch {
            mask: mask.len(),
            set: set.len(),
        });
    }
    let keep: Vec<bool> = mask.drop.iter().map(|&d| !d).collect();
    Ok(set.filter(&keep))
}

/// Opacity-compensated copy of a set for inference.
pub fn compensate_set(
    set: &GaussianSet,
    roi: &[bool],
    rate: f64,
) -> Result<GaussianSet, DropoutError> {
    if roi.len() != set.len() {
        return Err(DropoutError::LengthMismatch {
            mask: roi.len(),
            set: set.len(),
        });
    }
    let o = compensate_opacity(&set.opacities(), roi, rate);
    Ok(set
        .with_opacities(&o)
        .expect("scaling an opacity in (0, 1) by a factor in (0, 1] stays in (0, 1)"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian;

    fn spec() -> RoiSpec {
        RoiSpec::new(50.0, (-30f64).to_radians(), 10f64.to_radians(), 0.5).unwrap()
    }

    #[test]
    fn roi_examples() {
        let s = spec();
        let m = roi_mask(
            &[Point::new(51.0, 0.0, 0.0), Point::new(10.0, 0.0, 0.0)],
            &Pose::identity(),
            &s,
        );
        assert_eq!(m, vec![false, true]);
    }

    #[test]
    fn elevation_upper_bound_is_open() {
        let p = Point::new(10.0, 0.0, 2.5);
        let phi = (p.z / p.norm()).asin();
        let s = RoiSpec::new(100.0, -0.5, phi, 0.5).unwrap();
        assert_eq!(roi_mask(&[p], &Pose::identity(), &s), vec![false]);
        let s = RoiSpec::new(100.0, phi, 0.5, 0.5).unwrap();
        assert_eq!(roi_mask(&[p], &Pose::identity(), &s), vec![true]);
    }

    #[test]
    fn elevation_uses_sensor_frame() {
        // Sensor pitched down by 90° about y: world +x becomes sensor +z.
        let r = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Vector3::y_axis(),
            std::f64::consts::FRAC_PI_2,
        );
        let sensor = Pose::from_parts(*r.matrix(), Point::new(1.0, 0.0, 0.0));
        let s = spec();
        // World point 10 m ahead along x is straight "up" in the sensor frame.
        assert_eq!(
            roi_mask(&[Point::new(11.0, 0.0, 0.0)], &sensor, &s),
            vec![false]
        );
        assert_eq!(
            roi_mask(&[Point::new(1.0, 0.0, -10.0)], &sensor, &s),
            vec![true]
        );
    }

    #[test]
    fn origin_gaussian_gets_zero_elevation() {
        let s = spec();
        assert_eq!(
            roi_mask(&[Point::zeros()], &Pose::identity(), &s),
            vec![true]
        );
        let above = RoiSpec::new(50.0, 0.1, 0.2, 0.5).unwrap();
        assert_eq!(
            roi_mask(&[Point::zeros()], &Pose::identity(), &above),
            vec![false]
        );
    }

    #[test]
    fn sample_mask_edge_cases() {
        let roi = vec![true; 1000];
        assert_eq!(sample_mask(&roi, 0.0, 1).dropped(), 0);
        assert_eq!(sample_mask(&vec![false; 1000], 0.9, 1).dropped(), 0);
        let a = sample_mask(&roi, 0.5, 77);
        assert_eq!(a, sample_mask(&roi, 0.5, 77));
        assert_ne!(a.drop, sample_mask(&roi, 0.5, 78).drop);
    }

    #[test]
    fn drop_implies_roi() {
        let roi: Vec<bool> = (0..5000).map(|i| i % 3 == 0).collect();
        let m = sample_mask(&roi, 0.7, 3);
        assert!(m.drop.iter().zip(&m.roi).all(|(&d, &r)| !d || r));
    }

    #[test]
    fn compensation_examples() {
        let roi = [true, false];
        assert_eq!(compensate_opacity(&[0.8, 0.8], &roi, 0.0), vec![0.8, 0.8]);
        assert_eq!(compensate_opacity(&[0.8, 0.3], &roi, 0.5), vec![0.4, 0.3]);
    }

    #[test]
    fn apply_mask_counts() {
        let set = GaussianSet::new(
            (0..10)
                .map(|i| Gaussian::isotropic(Point::new(5.0 + i as f64, 0.0, 0.0), 0.1, 0.5, 0.5))
                .collect(),
        )
        .unwrap();
        let none = DropoutMask {
            roi: vec![true; 10],
            drop: vec![false; 10],
            seed: 0,
        };
        assert_eq!(apply_mask(&set, &none).unwrap(), set);
        let all = DropoutMask {
            roi: vec![true; 10],
            drop: vec![true; 10],
            seed: 0,
        };
        assert!(apply_mask(&set, &all).unwrap().is_empty());
        let m = sample_mask(&[true; 10], 0.5, 9);
        assert_eq!(apply_mask(&set, &m).unwrap().len(), 10 - m.dropped());
        let short = sample_mask(&[true; 3], 0.5, 9);
        assert!(matches!(
            apply_mask(&set, &short),
            Err(DropoutError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn mask_bytes_round_trip() {
        let roi: Vec<bool> = (0..64).map(|i| i % 2 == 0).collect();
        let m = sample_mask(&roi, 0.5, 12);
        let back = DropoutMask::from_bytes(&m.to_bytes(), 12).unwrap();
        assert_eq!(back, m);
        assert!(DropoutMask::from_bytes(&[2], 0).is_err());
        assert!(DropoutMask::from_bytes(&[7], 0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(RoiSpec::new(10.0, -0.1, 0.1, 1.0).is_err());
        assert!(RoiSpec::new(10.0, 0.1, 0.1, 0.5).is_err());
        assert!(RoiSpec::new(0.0, -0.1, 0.1, 0.5).is_err());
        let d = RoiSpec::for_sensor(&SensorModel::nuscenes_32());
        assert_eq!((d.d_max, d.drop_rate), (200.0, 0.5));
    }
}
