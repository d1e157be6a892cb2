//! Pseudo-LiDAR curation for an extrapolated pose.
//!
//! The pipeline runs four stages:
//!
//! 1. fuse the current frame with the static part of its temporal
//!    neighbours,
//! 2. move the fused cloud into the target sensor frame,
//! 3. curl occluded points so that every range-map cell keeps only its
//!    nearest hit,
//! 4. rescale each survivor's intensity by the change in incidence angle.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{Point, Pose};
use crate::rng::StreamRng;
use crate::sensor::{nearest_hits, LidarFrame, SensorModel, NO_HIT};
use crate::spatial::PointIndex;

/// Neighbour count for PCA normals.
pub const DEFAULT_NORMAL_K: usize = 16;
/// Default number of fused frames.
pub const DEFAULT_WINDOW: usize = 10;
/// `|n · r̂_ori|` below this returns the original intensity unchanged.
pub const GRAZING_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurationError {
    #[error("no frames to fuse")]
    EmptyWindow,
    #[error("current frame index {index} out of range for {len} frames")]
    InvalidIndex { index: usize, len: usize },
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("normal estimation needs 3 <= k <= cloud size, got k = {k} for {points} points")]
    NotEnoughPoints { k: usize, points: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Frames fused, the current one included.
    pub window: usize,
    /// Keep dynamic points of the current frame.
    pub include_dynamic_from_current: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            include_dynamic_from_current: true,
        }
    }
}

impl FusionConfig {
    pub fn with_window(window: usize) -> Self {
        Self {
            window,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        if self.window == 0 {
            return Err(CurationError::InvalidConfig(
                "window must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A point cloud with per-point payloads carried in lockstep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoScan {
    pub points: Vec<Point>,
    pub intensities: Vec<f64>,
    /// Index of the frame each point came from.
    pub source_frame_ids: Vec<u32>,
    pub normals: Option<Vec<Point>>,
}

impl PseudoScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the entries whose flag is set, payloads included.
    pub fn select(&self, keep: &[bool]) -> PseudoScan {
        assert_eq!(keep.len(), self.len());
        fn pick<T: Clone>(v: &[T], keep: &[bool]) -> Vec<T> {
            v.iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(x, _)| x.clone())
                .collect()
        }
        PseudoScan {
            points: pick(&self.points, keep),
            intensities: pick(&self.intensities, keep),
            source_frame_ids: pick(&self.source_frame_ids, keep),
            normals: self.normals.as_ref().map(|n| pick(n, keep)),
        }
    }

    /// Applies a rigid transform to points and normals.
    pub fn transformed(&self, pose: &Pose) -> PseudoScan {
        let r = pose.rotation();
        PseudoScan {
            points: pose.transform_points(&self.points),
            intensities: self.intensities.clone(),
            source_frame_ids: self.source_frame_ids.clone(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| r * n).collect()),
        }
    }

    /// Sorted, de-duplicated frame ids present in the scan.
    pub fn frame_ids(&self) -> Vec<u32> {
        let mut ids = self.source_frame_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Packs the scan as a frame with every point flagged static.
    pub fn to_frame(&self, pose: Pose, timestamp: i64) -> LidarFrame {
        LidarFrame::new_static(
            self.points.clone(),
            self.intensities.clone(),
            pose,
            timestamp,
        )
        .expect("pseudo scan intensities stay within [0, 1]")
    }
}

/// Frames contributing to the fused cloud: the current frame first, then the
/// `window − 1` others closest in timestamp (ties to the lower index).
pub fn select_window(frames: &[LidarFrame], current: usize, window: usize) -> Vec<usize> {
    let t = frames[current].timestamp;
    let mut others: Vec<usize> = (0..frames.len()).filter(|&i| i != current).collect();
    others.sort_by_key(|&i| ((frames[i].timestamp as i128 - t as i128).unsigned_abs(), i));
    others.truncate(window.saturating_sub(1));
    std::iter::once(current).chain(others).collect()
}

/// Fuses into the frame described by `frame` (world-from-frame).
fn fuse_into(
    frames: &[LidarFrame],
    current: usize,
    cfg: &FusionConfig,
    frame: &Pose,
) -> Result<PseudoScan, CurationError> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(CurationError::EmptyWindow);
    }
    if current >= frames.len() {
        return Err(CurationError::InvalidIndex {
            index: current,
            len: frames.len(),
        });
    }
    let mut out = PseudoScan::default();
    for i in select_window(frames, current, cfg.window) {
        let f = &frames[i];
        let keep_dynamic = i == current && cfg.include_dynamic_from_current;
        let to_target = frame.relative_from(&f.pose);
        let (r, t) = (to_target.rotation(), to_target.translation());
        for ((p, &intensity), &dynamic) in f
            .points()
            .iter()
            .zip(f.intensities())
            .zip(f.dynamic_flags())
        {
            if dynamic && !keep_dynamic {
                continue;
            }
            out.points.push(r * p + t);
            out.intensities.push(intensity);
            out.source_frame_ids.push(i as u32);
        }
    }
    Ok(out)
}

/// World-frame union of the current frame (dynamic points included) and the
/// static points of its temporal neighbours. No de-duplication.
pub fn fuse(
    frames: &[LidarFrame],
    current: usize,
    cfg: &FusionConfig,
) -> Result<PseudoScan, CurationError> {
    fuse_into(frames, current, cfg, &Pose::identity())
}

/// Expresses a world-frame cloud in the frame of `target`.
pub fn transform_to_view(world: &PseudoScan, target: &Pose) -> PseudoScan {
    world.transformed(&target.inverse())
}

/// `base · [I | (0, δ, 0)]`: a lateral move along the sensor's +y axis.
pub fn shift_pose(base: &Pose, delta: f64) -> Pose {
    base.compose(&Pose::from_translation(Point::new(0.0, delta, 0.0)))
}

/// Fair ±1 from the top bit of the next stream value.
pub fn sample_shift_direction(rng: &mut StreamRng) -> i8 {
    if rng.next_u64() >> 63 == 0 {
        1
    } else {
        -1
    }
}

/// Nearest-hit mask: true for the closest in-view, in-range point of each
/// occupied cell, ties to the lowest index.
pub fn raycast(points: &[Point], m: &SensorModel) -> Vec<bool> {
    let (winner, _) = nearest_hits(points, m);
    let mut mask = vec![false; points.len()];
    for &w in &winner {
        if w != NO_HIT {
            mask[w as usize] = true;
        }
    }
    mask
}

/// Drops every point that is not the nearest hit of its cell.
pub fn occlusion_curl(scan: &PseudoScan, m: &SensorModel) -> PseudoScan {
    scan.select(&raycast(&scan.points, m))
}

/// PCA normals and which points fell back to the sensor direction.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEstimate {
    pub normals: Vec<Point>,
    /// True where the neighbourhood was collinear or coincident.
    pub degenerate: Vec<bool>,
}

fn fallback_normal(p: &Point, origin: &Point) -> Point {
    let v = origin - p;
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Point::z()
    }
}

fn pca_normal(cloud: &[Point], neighbours: &[usize], p: &Point, origin: &Point) -> (Point, bool) {
    let k = neighbours.len() as f64;
    let centroid = neighbours
        .iter()
        .fold(Point::zeros(), |acc, &i| acc + cloud[i])
        / k;
    let mut cov = Matrix3::zeros();
    for &i in neighbours {
        let d = cloud[i] - centroid;
        cov += d * d.transpose();
    }
    cov /= k;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l_mid, l_max) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    // Coincident (no spread) or collinear (only one direction of spread).
    if !(l_max > 1e-24) || !(l_mid > 1e-10 * l_max) {
        return (fallback_normal(p, origin), true);
    }
    let mut n: Point = eig.eigenvectors.column(order[0]).into_owned();
    n /= n.norm();
    if n.dot(&(origin - p)) < 0.0 {
        n = -n;
    }
    (n, false)
}

fn check_k(k: usize, points: usize) -> Result<(), CurationError> {
    if k < 3 || k > points {
        return Err(CurationError::NotEnoughPoints { k, points });
    }
    Ok(())
}

/// Per-point plane-fit normals from the `k` nearest neighbours, oriented to
/// face `sensor_origin`.
pub fn estimate_normals(
    cloud: &[Point],
    k: usize,
    sensor_origin: &Point,
) -> Result<NormalEstimate, CurationError> {
    let all: Vec<usize> = (0..cloud.len()).collect();
    estimate_normals_at(cloud, &all, k, sensor_origin)
}

/// Normals for `queries` only, with neighbourhoods drawn from the whole cloud.
pub fn estimate_normals_at(
    cloud: &[Point],
    queries: &[usize],
    k: usize,
    sensor_origin: &Point,
) -> Result<NormalEstimate, CurationError> {
    check_k(k, cloud.len())?;
    let index = PointIndex::new(cloud);
    let (normals, degenerate) = queries
        .par_iter()
        .map(|&q| {
            let p = &cloud[q];
            let nn = index.knn(p, k);
            pca_normal(cloud, &nn, p, sensor_origin)
        })
        .unzip();
    Ok(NormalEstimate {
        normals,
        degenerate,
    })
}

/// Result of [`adjust_intensity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjustedIntensity {
    pub value: f64,
    /// The original ray grazed the surface and the input was passed through.
    pub grazing: bool,
}

/// `I_extra = clamp(I_ori · (n·r̂_extra)/(n·r̂_ori), 0, 1)`.
///
/// Rays are normalized here. When `|n·r̂_ori| < 1e-3` the ratio is
/// meaningless and `I_ori` is returned unchanged with `grazing` set.
pub fn adjust_intensity(
    i_ori: f64,
    normal: &Point,
    ray_ori: &Point,
    ray_extra: &Point,
) -> AdjustedIntensity {
    let cos_ori = normal.dot(&ray_ori.normalize());
    if !(cos_ori.abs() >= GRAZING_EPS) {
        return AdjustedIntensity {
            value: i_ori,
            grazing: true,
        };
    }
    let cos_extra = normal.dot(&ray_extra.normalize());
    AdjustedIntensity {
        value: (i_ori * (cos_extra / cos_ori)).clamp(0.0, 1.0),
        grazing: false,
    }
}

/// Counters gathered while curating one scan.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationStats {
    pub fused_points: usize,
    pub curled_points: usize,
    pub degenerate_normals: usize,
    pub grazing_passthrough: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curated {
    /// Points in the target sensor frame.
    pub scan: PseudoScan,
    pub stats: CurationStats,
}

/// Full pipeline with the default neighbour count.
pub fn curate(
    frames: &[LidarFrame],
    current: usize,
    m: &SensorModel,
    cfg: &FusionConfig,
    target: &Pose,
) -> Result<PseudoScan, CurationError> {
    curate_with(frames, current, m, cfg, target, DEFAULT_NORMAL_K).map(|c| c.scan)
}

/// Fuse, move to `target`, curl, then adjust intensities of the survivors.
///
/// The fused cloud is assembled directly in the target frame (one rigid hop
/// per source frame). Normals are fitted against the whole fused cloud, so
/// geometry hidden from the target still supports the plane fits; they are
/// only evaluated at the survivors.
pub fn curate_with(
    frames: &[LidarFrame],
    current: usize,
    m: &SensorModel,
    cfg: &FusionConfig,
    target: &Pose,
    normal_k: usize,
) -> Result<Curated, CurationError> {
    let fused = fuse_into(frames, current, cfg, target)?;
    check_k(normal_k, fused.len())?;
    let mask = raycast(&fused.points, m);
    let survivors: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect();

    let origin_ori = target.relative_from(&frames[current].pose).translation();
    let normals = estimate_normals_at(&fused.points, &survivors, normal_k, &origin_ori)?;

    let mut scan = fused.select(&mask);
    let adjusted: Vec<AdjustedIntensity> = scan
        .points
        .par_iter()
        .zip(&scan.intensities)
        .zip(&normals.normals)
        .map(|((p, &i), n)| adjust_intensity(i, n, &(p - origin_ori), p))
        .collect();
    let stats = CurationStats {
        fused_points: fused.len(),
        curled_points: scan.len(),
        degenerate_normals: normals.degenerate.iter().filter(|&&d| d).count(),
        grazing_passthrough: adjusted.iter().filter(|a| a.grazing).count(),
    };
    scan.intensities = adjusted.iter().map(|a| a.value).collect();
    scan.normals = Some(normals.normals);
    Ok(Curated { scan, stats })
}
