//! Rigid-body poses and spherical coordinates.
//!
//! Poses are stored world-from-sensor: a sensor-frame point `p_s` maps to the
//! world frame as `p_w = T · p_s`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// A 3-vector of f64, the point type used throughout the crate.
pub type Point = Vector3<f64>;

/// Norm below which a cartesian point has no spherical direction.
pub const ZERO_RANGE_EPS: f64 = 1e-12;
/// Horizontal radius below which the spherical Jacobian is undefined.
pub const POLE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum GeomError {
    #[error("point is at the sensor origin, spherical direction undefined")]
    ZeroRange,
    #[error("point lies on the elevation pole (horizontal radius {0:e})")]
    PoleDegenerate(f64),
    #[error("matrix is not a rigid transform: {0}")]
    NotRigid(&'static str),
}

/// Rigid SE(3) transform, world-from-sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    matrix: Matrix4<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_translation(t: Point) -> Self {
        Self::from_parts(Matrix3::identity(), t)
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Point) -> Self {
        let mut matrix = Matrix4::identity();
        matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        matrix.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self { matrix }
    }

    /// Builds a pose from a (w, x, y, z) quaternion, normalizing it first.
    pub fn from_quaternion(wxyz: [f64; 4], translation: Point) -> Self {
        let q =
            UnitQuaternion::from_quaternion(Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]));
        Self::from_parts(*q.to_rotation_matrix().matrix(), translation)
    }

    /// Validates a raw 4×4 matrix against the rigid-transform invariants
    /// (orthonormal rotation with det +1, bottom row `[0, 0, 0, 1]`).
    pub fn try_from_matrix(matrix: Matrix4<f64>) -> Result<Self, GeomError> {
        const TOL: f64 = 1e-9;
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NotRigid("non-finite entry"));
        }
        let bottom = matrix.fixed_view::<1, 4>(3, 0);
        if (bottom[0]).abs() > TOL
            || (bottom[1]).abs() > TOL
            || (bottom[2]).abs() > TOL
            || (bottom[3] - 1.0).abs() > TOL
        {
            return Err(GeomError::NotRigid("last row must be [0, 0, 0, 1]"));
        }
        let r: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let rrt = r * r.transpose();
        if (rrt - Matrix3::identity()).iter().any(|v| v.abs() > TOL) {
            return Err(GeomError::NotRigid("rotation block is not orthonormal"));
        }
        if (r.determinant() - 1.0).abs() > TOL {
            return Err(GeomError::NotRigid("rotation determinant is not +1"));
        }
        Ok(Self { matrix })
    }

    /// Row-major 16 entries, the on-disk layout of every binary format here.
    pub fn try_from_row_major(values: &[f64; 16]) -> Result<Self, GeomError> {
        Self::try_from_matrix(Matrix4::from_row_slice(values))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Sensor position in the world frame.
    pub fn translation(&self) -> Point {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `self · other` as a 4×4 product.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            matrix: self.matrix * other.matrix,
        }
    }

    /// Closed-form rigid inverse `[Rᵀ | −Rᵀt]`.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        Pose::from_parts(rt, t)
    }

    /// Transform taking points expressed in `source`'s frame into `self`'s
    /// frame, i.e. `self⁻¹ · source`. Bitwise-equal poses give the exact
    /// identity so that a zero-length hop does not perturb coordinates.
    pub fn relative_from(&self, source: &Pose) -> Pose {
        if self.matrix == source.matrix {
            Pose::identity()
        } else {
            self.inverse().compose(source)
        }
    }

    pub fn transform_point(&self, p: &Point) -> Point {
        self.rotation() * p + self.translation()
    }

    pub fn transform_vector(&self, v: &Point) -> Point {
        self.rotation() * v
    }

    /// Maps a batch of points; the rotation block is extracted once.
    pub fn transform_points(&self, points: &[Point]) -> Vec<Point> {
        let r = self.rotation();
        let t = self.translation();
        points.iter().map(|p| r * p + t).collect()
    }
}

/// The convenience free functions mirror the operation names used by callers.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert(p: &Pose) -> Pose {
    p.inverse()
}

/// Azimuth/elevation/range triple. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalPoint {
    /// atan2(y, x), in (−π, π].
    pub azimuth: f64,
    /// arcsin(z / r), in [−π/2, π/2].
    pub elevation: f64,
    pub range: f64,
}

impl SphericalPoint {
    pub fn new(azimuth: f64, elevation: f64, range: f64) -> Self {
        Self {
            azimuth,
            elevation,
            range,
        }
    }
}

/// Spherical coordinates without the zero-range check; callers that already
/// filter on range use this in hot loops.
#[inline]
pub(crate) fn spherical_unchecked(p: &Point) -> SphericalPoint {
    let range = p.norm();
    let elevation = if range > 0.0 {
        (p.z / range).clamp(-1.0, 1.0).asin()
    } else {
        0.0
    };
    // atan2(0, 0) is 0 in IEEE, which gives poles a canonical azimuth. -0.0
    // inputs would return ±π, so fold them to +0.
    let azimuth = (p.y + 0.0).atan2(p.x + 0.0);
    SphericalPoint {
        azimuth: if azimuth == -std::f64::consts::PI {
            std::f64::consts::PI
        } else {
            azimuth
        },
        elevation,
        range,
    }
}

pub fn to_spherical(p: &Point) -> Result<SphericalPoint, GeomError> {
    if p.norm() < ZERO_RANGE_EPS {
        return Err(GeomError::ZeroRange);
    }
    Ok(spherical_unchecked(p))
}

pub fn from_spherical(s: &SphericalPoint) -> Point {
    let (sa, ca) = s.azimuth.sin_cos();
    let (se, ce) = s.elevation.sin_cos();
    Point::new(s.range * ce * ca, s.range * ce * sa, s.range * se)
}

/// Jacobian of (azimuth, elevation, range) with respect to (x, y, z).
pub fn spherical_jacobian(p: &Point) -> Result<Matrix3<f64>, GeomError> {
    let rho2 = p.x * p.x + p.y * p.y;
    let rho = rho2.sqrt();
    if rho <= POLE_EPS {
        return Err(GeomError::PoleDegenerate(rho));
    }
    let r2 = rho2 + p.z * p.z;
    let r = r2.sqrt();
    let k = 1.0 / (r2 * rho);
    #[rustfmt::skip]
    let j = Matrix3::new(
        -p.y / rho2,       p.x / rho2,       0.0,
        -p.x * p.z * k,    -p.y * p.z * k,   rho / r2,
        p.x / r,           p.y / r,          p.z / r,
    );
    Ok(j)
}

/// Wraps an angle difference into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}
