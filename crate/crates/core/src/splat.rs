//! Forward-only spherical Gaussian range-map renderer.
//!
//! Each Gaussian is moved into the sensor frame, its mean converted to
//! (azimuth, elevation, range) and its covariance pushed through the
//! spherical Jacobian. Cells are shaded at their centers: every Gaussian
//! whose 3σ angular ellipse covers a cell center contributes
//! `α = o · exp(-½ dᵀ Σ⁻¹ d)` and contributions are composited front to back
//! in order of mean range.

use nalgebra::{Matrix2, Matrix3, Quaternion, UnitQuaternion, Vector2};
use rayon::prelude::*;

use crate::geom::{
    spherical_jacobian, spherical_unchecked, wrap_angle, Point, Pose, SphericalPoint,
};
use crate::sensor::{RangeMap, SensorModel};

/// Quaternion norm tolerance applied to sets loaded from single-precision files.
pub const F32_QUAT_TOLERANCE: f64 = 1e-6;
/// Sensor-frame horizontal radius at or below which a Gaussian is skipped.
pub const SPLAT_POLE_EPS: f64 = 1e-6;
/// Footprint radius in standard deviations.
pub const FOOTPRINT_SIGMA: f64 = 3.0;
/// Contributions below this alpha are skipped.
pub const ALPHA_FLOOR: f64 = 1.0 / 255.0;
/// Accumulated alpha at or above which a cell counts as a return.
pub const OCCUPANCY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplatError {
    #[error("gaussian has invalid {field}: {detail}")]
    InvalidGaussian { field: &'static str, detail: String },
    #[error("gaussian {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<SplatError>,
    },
}

/// One primitive. `rotation` is a (w, x, y, z) unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: Point,
    pub scale: Point,
    pub rotation: [f64; 4],
    pub opacity: f64,
    /// Intensity feature in [0, 1].
    pub feature: f64,
}

impl Gaussian {
    /// Axis-aligned isotropic Gaussian.
    pub fn isotropic(mean: Point, sigma: f64, opacity: f64, feature: f64) -> Self {
        Self {
            mean,
            scale: Point::new(sigma, sigma, sigma),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity,
            feature,
        }
    }

    pub fn validate(&self, quat_tolerance: f64) -> Result<(), SplatError> {
        let bad = |field, detail: String| Err(SplatError::InvalidGaussian { field, detail });
        if self.mean.iter().any(|v| !v.is_finite()) {
            return bad("mean", format!("{:?}", self.mean));
        }
        if self.scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("scale", format!("{:?} must be positive", self.scale));
        }
        let qn = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((qn - 1.0).abs() <= quat_tolerance) {
            return bad("rotation", format!("quaternion norm {qn}"));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return bad("opacity", format!("{} outside (0, 1)", self.opacity));
        }
        if !(0.0..=1.0).contains(&self.feature) {
            return bad("feature", format!("{} outside [0, 1]", self.feature));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance(&self.scale, &self.rotation)
    }

    /// Copy with the quaternion rescaled to unit length.
    pub fn normalized(&self) -> Self {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            rotation: self.rotation.map(|v| v / n),
            ..*self
        }
    }
}

/// Σ = R · diag(S²) · Rᵀ.
pub fn covariance(scale: &Point, wxyz: &[f64; 4]) -> Matrix3<f64> {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]));
    let r = q.to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    r * s2 * r.transpose()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    gaussians: Vec<Gaussian>,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>) -> Result<Self, SplatError> {
        for (index, g) in gaussians.iter().enumerate() {
            g.validate(1e-6).map_err(|e| SplatError::AtIndex {
                index,
                source: Box::new(e),
            })?;
        }
        Ok(Self { gaussians })
    }

    pub(crate) fn from_vec_unchecked(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    pub fn as_slice(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn means(&self) -> Vec<Point> {
        self.gaussians.iter().map(|g| g.mean).collect()
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.gaussians.iter().map(|g| g.opacity).collect()
    }

    /// Same set with opacities replaced; lengths must match.
    pub fn with_opacities(&self, opacities: &[f64]) -> Result<Self, SplatError> {
        assert_eq!(opacities.len(), self.len(), "one opacity per gaussian");
        let gaussians = self
            .gaussians
            .iter()
            .zip(opacities)
            .map(|(g, &o)| Gaussian { opacity: o, ..*g })
            .collect();
        Self::new(gaussians)
    }

    /// Keeps the Gaussians whose flag is true, preserving order.
    pub fn filter(&self, keep: &[bool]) -> Self {
        assert_eq!(keep.len(), self.len());
        Self {
            gaussians: self
                .gaussians
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(g, _)| *g)
                .collect(),
        }
    }
}

/// Gaussians expressed in the sensor's spherical frame.
#[derive(Debug, Clone, Default)]
pub struct SphericalGaussians {
    /// Index into the source set for each projected entry.
    pub source: Vec<usize>,
    pub means: Vec<SphericalPoint>,
    /// Covariance over (azimuth, elevation, range).
    pub covariances: Vec<Matrix3<f64>>,
    /// Gaussians whose sensor-frame mean sits on the elevation pole.
    pub skipped: Vec<usize>,
}

/// Moves every Gaussian into the sensor's spherical frame:
/// `μˢ = sph(Rᵀ(μ − t))`, `Σˢ = J Σᴸ Jᵀ` with `Σᴸ = Rᵀ Σ R`.
pub fn to_sensor_spherical(set: &GaussianSet, sensor: &Pose) -> SphericalGaussians {
    let rt = sensor.rotation().transpose();
    let t = sensor.translation();
    let projected: Vec<Option<(SphericalPoint, Matrix3<f64>)>> = set
        .gaussians
        .par_iter()
        .map(|g| {
            let local = rt * (g.mean - t);
            if local.x.hypot(local.y) <= SPLAT_POLE_EPS {
                return None;
            }
            let j = spherical_jacobian(&local).ok()?;
            let cov_local = rt * g.covariance() * rt.transpose();
            Some((spherical_unchecked(&local), j * cov_local * j.transpose()))
        })
        .collect();
    let mut out = SphericalGaussians::default();
    for (i, p) in projected.into_iter().enumerate() {
        match p {
            Some((m, c)) => {
                out.source.push(i);
                out.means.push(m);
                out.covariances.push(c);
            }
            None => out.skipped.push(i),
        }
    }
    out
}

/// Output of [`render_range_map`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub map: RangeMap,
    /// Accumulated opacity `1 − ∏(1 − αᵢ)` per cell, a ray-drop proxy.
    pub alpha: Vec<f64>,
    /// Gaussians skipped as pole-degenerate.
    pub skipped: Vec<usize>,
}

struct Splat {
    mean_az: f64,
    mean_el: f64,
    range: f64,
    conic: Matrix2<f64>,
    half_az: f64,
    half_el: f64,
    opacity: f64,
    feature: f64,
}

/// Continuous column coordinate of an azimuth, unwrapped toward the nearest
/// edge of a partial field of view.
fn column_coord(az: f64, m: &SensorModel) -> f64 {
    use std::f64::consts::TAU;
    let [lo, hi] = m.azimuth_fov();
    let span = hi - lo;
    let mut off = (az - lo).rem_euclid(TAU);
    if !m.is_full_circle() && off > span + 0.5 * (TAU - span) {
        off -= TAU;
    }
    off * m.width() as f64 / span
}

impl Splat {
    /// Cells whose centers fall inside the footprint bounding box, with the
    /// alpha each receives.
    fn contributions(&self, m: &SensorModel) -> Vec<(u32, f64)> {
        let (h, w) = (m.height(), m.width());
        let el_step = m.elevation_step();
        let az_step = m.azimuth_step();
        let el0 = m.elevation_fov()[0];
        let v = (self.mean_el - el0) / el_step;
        let dv = self.half_el / el_step;
        let row_lo = (v - dv).ceil().max(0.0);
        let row_hi = (v + dv).floor().min(h as f64 - 1.0);
        if row_lo > row_hi {
            return Vec::new();
        }
        let u = column_coord(self.mean_az, m);
        let du = self.half_az / az_step;
        let (col_lo, col_hi) = if m.is_full_circle() {
            if 2.0 * du + 1.0 >= w as f64 {
                (0.0, w as f64 - 1.0)
            } else {
                ((u - du).ceil(), (u + du).floor())
            }
        } else {
            (
                (u - du).ceil().max(0.0),
                (u + du).floor().min(w as f64 - 1.0),
            )
        };
        if col_lo > col_hi {
            return Vec::new();
        }
        let mut out = Vec::new();
        for row in row_lo as i64..=row_hi as i64 {
            let el_c = el0 + row as f64 * el_step;
            for c in col_lo as i64..=col_hi as i64 {
                let col = c.rem_euclid(w as i64) as usize;
                let (az_c, _) = m.cell_center(crate::sensor::Cell::new(row as usize, col));
                let d = Vector2::new(wrap_angle(az_c - self.mean_az), el_c - self.mean_el);
                let q = (d.transpose() * self.conic * d)[(0, 0)];
                if q > FOOTPRINT_SIGMA * FOOTPRINT_SIGMA {
                    continue;
                }
                let alpha = self.opacity * (-0.5 * q).exp();
                if alpha < ALPHA_FLOOR {
                    continue;
                }
                out.push(((row as usize * w + col) as u32, alpha));
            }
        }
        out
    }
}

/// Renders a range map with front-to-back alpha compositing.
///
/// Per cell: `range = Σ rᵢ αᵢ Tᵢ / A`, `intensity = Σ fᵢ αᵢ Tᵢ / A` with
/// `Tᵢ = ∏_{j<i}(1 − αⱼ)` and `A = 1 − ∏(1 − αᵢ)`. Cells with `A < 0.5` are
/// left empty. Gaussians whose mean range exceeds the sensor's maximum range
/// are not drawn.
pub fn render_range_map(set: &GaussianSet, sensor: &Pose, m: &SensorModel) -> Rendered {
    let sph = to_sensor_spherical(set, sensor);

    let mut order: Vec<usize> = (0..sph.means.len())
        .filter(|&k| sph.means[k].range > 0.0 && sph.means[k].range <= m.max_range())
        .collect();
    order.sort_by(|&a, &b| {
        sph.means[a]
            .range
            .total_cmp(&sph.means[b].range)
            .then(sph.source[a].cmp(&sph.source[b]))
    });

    let splats: Vec<Splat> = order
        .iter()
        .filter_map(|&k| {
            let s = &sph.covariances[k];
            let cov2 = Matrix2::new(s[(0, 0)], s[(0, 1)], s[(1, 0)], s[(1, 1)]);
            if !(cov2.determinant() > 0.0) {
                return None;
            }
            let conic = cov2.try_inverse()?;
            let g = &set.gaussians[sph.source[k]];
            Some(Splat {
                mean_az: sph.means[k].azimuth,
                mean_el: sph.means[k].elevation,
                range: sph.means[k].range,
                conic,
                half_az: (FOOTPRINT_SIGMA * s[(0, 0)].sqrt()).min(std::f64::consts::PI),
                half_el: FOOTPRINT_SIGMA * s[(1, 1)].sqrt(),
                opacity: g.opacity,
                feature: g.feature,
            })
        })
        .collect();

    let per_splat: Vec<Vec<(u32, f64)>> = splats.par_iter().map(|s| s.contributions(m)).collect();

    // Splats are already in depth order, so appending keeps each bin sorted.
    let n_cells = m.cell_count();
    let mut bins: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_cells];
    for (k, contribs) in per_splat.iter().enumerate() {
        for &(cell, alpha) in contribs {
            bins[cell as usize].push((k as u32, alpha));
        }
    }

    let shaded: Vec<(f64, f64, f64)> = bins
        .par_iter()
        .map(|bin| {
            let mut transmittance = 1.0;
            let mut range = 0.0;
            let mut feature = 0.0;
            for &(k, alpha) in bin {
                let s = &splats[k as usize];
                let weight = alpha * transmittance;
                range += s.range * weight;
                feature += s.feature * weight;
                transmittance *= 1.0 - alpha;
            }
            (1.0 - transmittance, range, feature)
        })
        .collect();

    let mut map = RangeMap::empty(m.height(), m.width());
    let mut alpha = Vec::with_capacity(n_cells);
    for (cell, &(acc, range, feature)) in shaded.iter().enumerate() {
        alpha.push(acc);
        if acc >= OCCUPANCY_THRESHOLD {
            map.set(cell, range / acc, (feature / acc).clamp(0.0, 1.0));
        }
    }
    Rendered {
        map,
        alpha,
        skipped: sph.skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::Cell;
    use approx::assert_abs_diff_eq;
    use nalgebra::SymmetricEigen;
    use std::f64::consts::PI;

    fn sensor() -> SensorModel {
        SensorModel::new(16, 64, [-PI, PI], [-0.4, 0.4], 100.0).unwrap()
    }

    fn on_cell(m: &SensorModel, cell: Cell, range: f64) -> Point {
        let (az, el) = m.cell_center(cell);
        crate::geom::from_spherical(&SphericalPoint::new(az, el, range))
    }

    #[test]
    fn covariance_examples() {
        let id = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(
            covariance(&Point::new(1.0, 1.0, 1.0), &id),
            Matrix3::identity()
        );
        assert_eq!(
            covariance(&Point::new(2.0, 1.0, 1.0), &id),
            Matrix3::from_diagonal(&Point::new(4.0, 1.0, 1.0))
        );
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let s = Point::new(
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
            );
            let q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let cov = covariance(&s, &q);
            assert_abs_diff_eq!(cov, cov.transpose(), epsilon = 1e-12);
            let mut eig: Vec<f64> = SymmetricEigen::new(cov)
                .eigenvalues
                .iter()
                .copied()
                .collect();
            eig.sort_by(f64::total_cmp);
            let mut expected: Vec<f64> = s.iter().map(|v| v * v).collect();
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn isotropic_gaussian_on_x_axis() {
        let sigma = 0.3;
        let set = GaussianSet::new(vec![Gaussian::isotropic(
            Point::new(10.0, 0.0, 0.0),
            sigma,
            0.5,
            0.5,
        )])
        .unwrap();
        let sph = to_sensor_spherical(&set, &Pose::identity());
        let c = sph.covariances[0];
        let s2 = sigma * sigma;
        let expected = Matrix3::from_diagonal(&Point::new(s2 / 100.0, s2 / 100.0, s2));
        assert_abs_diff_eq!(c, expected, epsilon = 1e-12);
        assert_eq!(sph.means[0], SphericalPoint::new(0.0, 0.0, 10.0));
    }

    #[test]
    fn pole_gaussians_are_skipped() {
        let set = GaussianSet::new(vec![
            Gaussian::isotropic(Point::new(0.0, 0.0, 5.0), 0.1, 0.5, 0.5),
            Gaussian::isotropic(Point::new(5.0, 0.0, 0.0), 0.1, 0.5, 0.5),
        ])
        .unwrap();
        let sph = to_sensor_spherical(&set, &Pose::identity());
        assert_eq!(sph.skipped, vec![0]);
        assert_eq!(sph.source, vec![1]);
    }

    #[test]
    fn conjugation_invariance() {
        let set = GaussianSet::new(vec![Gaussian {
            mean: Point::new(4.0, 3.0, 1.0),
            scale: Point::new(0.3, 0.1, 0.2),
            rotation: [0.8, 0.2, -0.3, 0.1],
            opacity: 0.7,
            feature: 0.2,
        }
        .normalized()])
        .unwrap();
        let sensor = Pose::from_quaternion([0.9, 0.0, 0.1, 0.3], Point::new(1.0, -2.0, 0.5));
        let a = to_sensor_spherical(&set, &sensor);
        let world = Pose::from_quaternion([0.3, -0.5, 0.2, 0.7], Point::new(-3.0, 8.0, 2.0));
        let moved: Vec<Gaussian> = set
            .iter()
            .map(|g| {
                let q = UnitQuaternion::from_quaternion(Quaternion::new(
                    g.rotation[0],
                    g.rotation[1],
                    g.rotation[2],
                    g.rotation[3],
                ));
                let wq = UnitQuaternion::from_rotation_matrix(
                    &nalgebra::Rotation3::from_matrix_unchecked(world.rotation()),
                );
                let nq = wq * q;
                Gaussian {
                    mean: world.transform_point(&g.mean),
                    rotation: [nq.w, nq.i, nq.j, nq.k],
                    ..*g
                }
            })
            .collect();
        let b = to_sensor_spherical(&GaussianSet::new(moved).unwrap(), &world.compose(&sensor));
        assert_abs_diff_eq!(a.means[0].azimuth, b.means[0].azimuth, epsilon = 1e-9);
        assert_abs_diff_eq!(a.means[0].elevation, b.means[0].elevation, epsilon = 1e-9);
        assert_abs_diff_eq!(a.means[0].range, b.means[0].range, epsilon = 1e-9);
        assert_abs_diff_eq!(a.covariances[0], b.covariances[0], epsilon = 1e-9);
    }

    #[test]
    fn single_tiny_gaussian() {
        let m = sensor();
        let cell = Cell::new(5, 20);
        let set = GaussianSet::new(vec![Gaussian::isotropic(
            on_cell(&m, cell, 5.0),
            1e-3,
            0.99,
            0.4,
        )])
        .unwrap();
        let r = render_range_map(&set, &Pose::identity(), &m);
        assert_eq!(r.map.occupied_count(), 1);
        let (range, intensity) = r.map.get(cell).unwrap();
        assert_abs_diff_eq!(range, 5.0, epsilon = 1e-3);
        assert_abs_diff_eq!(intensity, 0.4, epsilon = 1e-9);
        assert_abs_diff_eq!(r.alpha[cell.index(m.width())], 0.99, epsilon = 1e-6);
    }

    #[test]
    fn empty_set_renders_nothing() {
        let m = sensor();
        let r = render_range_map(&GaussianSet::default(), &Pose::identity(), &m);
        assert_eq!(r.map.occupied_count(), 0);
        assert!(r.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn two_gaussians_on_one_ray() {
        let m = sensor();
        let cell = Cell::new(8, 40);
        let set = GaussianSet::new(vec![
            Gaussian::isotropic(on_cell(&m, cell, 7.0), 1e-3, 0.99, 0.0),
            Gaussian::isotropic(on_cell(&m, cell, 5.0), 1e-3, 0.99, 1.0),
        ])
        .unwrap();
        let r = render_range_map(&set, &Pose::identity(), &m);
        let (range, _) = r.map.get(cell).unwrap();
        let expected = (5.0 * 0.99 + 7.0 * 0.99 * 0.01) / (1.0 - 0.01 * 0.01);
        assert_abs_diff_eq!(range, expected, epsilon = 1e-2);
        assert_abs_diff_eq!(r.alpha[cell.index(m.width())], 0.9999, epsilon = 1e-6);
    }

    #[test]
    fn low_alpha_cells_are_dropped() {
        let m = sensor();
        let cell = Cell::new(3, 3);
        let set = GaussianSet::new(vec![Gaussian::isotropic(
            on_cell(&m, cell, 5.0),
            1e-3,
            0.4,
            0.4,
        )])
        .unwrap();
        let r = render_range_map(&set, &Pose::identity(), &m);
        assert_eq!(r.map.occupied_count(), 0);
        assert_abs_diff_eq!(r.alpha[cell.index(m.width())], 0.4, epsilon = 1e-6);
    }

    #[test]
    fn wide_gaussian_stays_inside_contributor_range_bounds() {
        let m = sensor();
        let set = GaussianSet::new(vec![
            Gaussian::isotropic(Point::new(10.0, 0.0, 0.0), 1.0, 0.9, 0.2),
            Gaussian::isotropic(Point::new(12.0, 0.5, 0.0), 1.5, 0.9, 0.8),
        ])
        .unwrap();
        let r = render_range_map(&set, &Pose::identity(), &m);
        assert!(r.map.occupied_count() > 1);
        let lo = 10.0;
        let hi = (12.0f64 * 12.0 + 0.25).sqrt();
        for (&rg, &o) in r.map.ranges().iter().zip(r.map.occupancy()) {
            if o {
                assert!(rg >= lo - 1e-9 && rg <= hi + 1e-9, "{rg}");
            }
        }
        assert!(r.alpha.iter().all(|&a| (0.0..1.0).contains(&a)));
    }

    #[test]
    fn seam_gaussian_covers_both_sides() {
        let m = sensor();
        let set = GaussianSet::new(vec![Gaussian::isotropic(
            Point::new(-10.0, 0.0, 0.0),
            0.5,
            0.9,
            0.5,
        )])
        .unwrap();
        let r = render_range_map(&set, &Pose::identity(), &m);
        let row = 8;
        let w = m.width();
        // Azimuth π is column 0; both neighbours across the seam get the
        // same partial coverage.
        assert!(r.alpha[row * w] > 0.5);
        assert!(r.alpha[row * w + 1] > 0.05);
        assert_abs_diff_eq!(
            r.alpha[row * w + 1],
            r.alpha[row * w + w - 1],
            epsilon = 1e-9
        );
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut g = Gaussian::isotropic(Point::new(1.0, 0.0, 0.0), 0.1, 0.5, 0.5);
        g.opacity = 1.0;
        assert!(GaussianSet::new(vec![g]).is_err());
        let mut g = Gaussian::isotropic(Point::new(1.0, 0.0, 0.0), 0.1, 0.5, 0.5);
        g.scale.x = 0.0;
        assert!(GaussianSet::new(vec![g]).is_err());
        let mut g = Gaussian::isotropic(Point::new(1.0, 0.0, 0.0), 0.1, 0.5, 0.5);
        g.rotation = [1.0, 1.0, 0.0, 0.0];
        assert!(GaussianSet::new(vec![g]).is_err());
    }
}
