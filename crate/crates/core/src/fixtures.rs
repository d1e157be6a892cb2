//! Synthetic scenes used by tests, the acceptance suite and `gen-fixtures`.
//!
//! Scans are produced by casting one ray per range-map cell center against a
//! handful of axis-aligned boxes, so every frame sees only what is visible
//! from its own pose.

use std::f64::consts::PI;

use crate::geom::{from_spherical, Point, Pose, SphericalPoint};
use crate::rng::StreamRng;
use crate::sensor::{Cell, LidarFrame, SensorModel};
use crate::splat::{Gaussian, GaussianSet};

/// Axis-aligned box with a reflectance used for intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub min: Point,
    pub max: Point,
    pub reflectance: f64,
    pub dynamic: bool,
}

impl SceneBox {
    pub fn new(min: Point, max: Point, reflectance: f64) -> Self {
        Self {
            min,
            max,
            reflectance,
            dynamic: false,
        }
    }

    pub fn translated(&self, t: Point) -> Self {
        Self {
            min: self.min + t,
            max: self.max + t,
            ..*self
        }
    }

    /// Entry distance and outward face normal, slab method.
    fn intersect(&self, origin: &Point, dir: &Point) -> Option<(f64, Point)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut normal = Point::zeros();
        for axis in 0..3 {
            let (o, d) = (origin[axis], dir[axis]);
            if d.abs() < 1e-15 {
                if o < self.min[axis] || o > self.max[axis] {
                    return None;
                }
                continue;
            }
            let mut t0 = (self.min[axis] - o) / d;
            let mut t1 = (self.max[axis] - o) / d;
            let mut sign = -1.0;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
                sign = 1.0;
            }
            if t0 > t_near {
                t_near = t0;
                normal = Point::zeros();
                normal[axis] = sign;
            }
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        (t_near > 1e-9).then_some((t_near, normal))
    }
}

/// Boxes visible to a ray-casting scanner.
#[derive(Debug, Clone, Default)]
pub struct Scene {
    pub boxes: Vec<SceneBox>,
}

impl Scene {
    /// Casts one ray per cell from `pose` and returns the first hit per ray.
    /// Rays leave a quarter cell above and right of the center (plus optional
    /// jitter) so none sits on a rounding boundary or the field-of-view edge.
    pub fn scan(
        &self,
        pose: &Pose,
        m: &SensorModel,
        timestamp: i64,
        jitter: Option<&mut StreamRng>,
    ) -> LidarFrame {
        let origin = pose.translation();
        let rot = pose.rotation();
        let rt = rot.transpose();
        let mut points = Vec::new();
        let mut intensities = Vec::new();
        let mut dynamic = Vec::new();
        let mut jitter = jitter;
        for row in 0..m.height() {
            for col in 0..m.width() {
                let (mut az, mut el) = inner_direction(m, row, col);
                if let Some(rng) = jitter.as_deref_mut() {
                    az += rng.range_f64(-0.2, 0.2) * m.azimuth_step();
                    el += rng.range_f64(-0.2, 0.2) * m.elevation_step();
                }
                let dir_sensor = from_spherical(&SphericalPoint::new(az, el, 1.0));
                let dir = rot * dir_sensor;
                let hit = self
                    .boxes
                    .iter()
                    .filter_map(|b| b.intersect(&origin, &dir).map(|(t, n)| (t, n, b)))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                if let Some((t, n, b)) = hit {
                    if t > m.max_range() {
                        continue;
                    }
                    let world = origin + dir * t;
                    points.push(rt * (world - origin));
                    intensities.push((b.reflectance * n.dot(&dir).abs()).clamp(0.0, 1.0));
                    dynamic.push(b.dynamic);
                }
            }
        }
        LidarFrame::new(points, intensities, dynamic, *pose, timestamp)
            .expect("fixture frame is valid")
    }
}

fn inner_direction(m: &SensorModel, row: usize, col: usize) -> (f64, f64) {
    let (az, el) = m.cell_center(Cell::new(row, col));
    (az + 0.25 * m.azimuth_step(), el + 0.25 * m.elevation_step())
}

/// 32 × 1088 spinning sensor, the resolution used for the fixtures.
pub fn fixture_sensor() -> SensorModel {
    SensorModel::nuscenes_32()
}

/// Straight corridor along +x with walls at y = ±8 m, a ground slab, a
/// pillar close to the left wall and a vehicle driving ahead (flagged
/// dynamic). Frames are 2 m apart along x, 100 ms apart.
pub struct Corridor {
    pub frames: Vec<LidarFrame>,
    pub sensor: SensorModel,
    /// Index of the middle frame.
    pub current: usize,
}

pub fn corridor(frame_count: usize) -> Corridor {
    let sensor = fixture_sensor();
    let static_boxes = vec![
        SceneBox::new(
            Point::new(-60.0, 8.0, -1.8),
            Point::new(80.0, 8.5, 4.0),
            0.8,
        ),
        SceneBox::new(
            Point::new(-60.0, -8.5, -1.8),
            Point::new(80.0, -8.0, 4.0),
            0.6,
        ),
        SceneBox::new(
            Point::new(-60.0, -8.5, -2.0),
            Point::new(80.0, 8.5, -1.8),
            0.3,
        ),
        // pillar between the lane and the left wall
        SceneBox::new(Point::new(16.0, 1.5, -1.8), Point::new(18.0, 3.5, 3.0), 0.9),
    ];
    let vehicle = SceneBox {
        dynamic: true,
        ..SceneBox::new(
            Point::new(14.0, -1.0, -1.8),
            Point::new(18.5, 1.0, -0.2),
            0.5,
        )
    };
    let frames = (0..frame_count)
        .map(|i| {
            let x = 2.0 * i as f64;
            let mut scene = Scene {
                boxes: static_boxes.clone(),
            };
            scene
                .boxes
                .push(vehicle.translated(Point::new(2.5 * i as f64, 0.0, 0.0)));
            let yaw = 0.01 * (i as f64 - frame_count as f64 / 2.0);
            let pose = Pose::from_quaternion(
                [(yaw / 2.0).cos(), 0.0, 0.0, (yaw / 2.0).sin()],
                Point::new(x, 0.0, 0.0),
            );
            scene.scan(&pose, &sensor, i as i64 * 100_000, None)
        })
        .collect();
    Corridor {
        frames,
        sensor,
        current: frame_count / 2,
    }
}

/// Two parallel walls facing the sensor: a far wall at x = 10 m over the
/// whole azimuth field of view and a near wall at x = 5 m covering the left
/// half of it. One point per cell per wall, both on the same ray so the walls
/// share cells where they overlap.
pub struct TwoPlane {
    pub frame: LidarFrame,
    pub sensor: SensorModel,
    /// Per point: true for far-wall points.
    pub is_far: Vec<bool>,
    /// Per cell: true where the near wall has a point.
    pub covered: Vec<bool>,
}

pub fn two_plane() -> TwoPlane {
    let sensor = SensorModel::from_json(&crate::sensor::SensorModelJson {
        height: 32,
        width: 256,
        azimuth_fov_deg: [-40.0, 40.0],
        elevation_fov_deg: [-15.0, 15.0],
        max_range_m: 200.0,
    })
    .expect("valid fixture sensor");
    let mut points = Vec::new();
    let mut intensities = Vec::new();
    let mut is_far = Vec::new();
    let mut covered = vec![false; sensor.cell_count()];
    for row in 0..sensor.height() {
        for col in 0..sensor.width() {
            let (az, el) = inner_direction(&sensor, row, col);
            let dir = from_spherical(&SphericalPoint::new(az, el, 1.0));
            points.push(dir * (10.0 / dir.x));
            intensities.push(0.4);
            is_far.push(true);
            if col < sensor.width() / 2 {
                points.push(dir * (5.0 / dir.x));
                intensities.push(0.7);
                is_far.push(false);
                covered[Cell::new(row, col).index(sensor.width())] = true;
            }
        }
    }
    let frame = LidarFrame::new_static(points, intensities, Pose::identity(), 0)
        .expect("valid fixture frame");
    TwoPlane {
        frame,
        sensor,
        is_far,
        covered,
    }
}

/// Random frame for property checks: `n` points with ranges in
/// `[0.5, 1.2 · max_range]` and directions spread slightly beyond the field
/// of view so the visibility filters get exercised.
pub fn random_frame(rng: &mut StreamRng, n: usize, m: &SensorModel, pose: Pose) -> LidarFrame {
    let [el_lo, el_hi] = m.elevation_fov();
    let pad = 0.1 * (el_hi - el_lo);
    let points: Vec<Point> = (0..n)
        .map(|_| {
            let az = rng.range_f64(-PI, PI);
            let el = rng.range_f64((el_lo - pad).max(-1.5), (el_hi + pad).min(1.5));
            let r = rng.range_f64(0.5, 1.2 * m.max_range());
            from_spherical(&SphericalPoint::new(az, el, r))
        })
        .collect();
    let intensities = (0..n).map(|_| rng.next_f64()).collect();
    let dynamic = vec![false; n];
    LidarFrame::new(points, intensities, dynamic, pose, 0).expect("valid random frame")
}

/// Random sensor model with modest raster size.
pub fn random_sensor(rng: &mut StreamRng) -> SensorModel {
    let h = 4 + (rng.next_u64() % 60) as usize;
    let w = 16 + (rng.next_u64() % 1100) as usize;
    let full = rng.next_f64() < 0.5;
    let az = if full {
        [-PI, PI]
    } else {
        let lo = rng.range_f64(-PI, 0.0);
        [lo, lo + rng.range_f64(0.5, PI)]
    };
    let el_lo = rng.range_f64(-0.6, -0.05);
    let el = [el_lo, rng.range_f64(0.02, 0.4)];
    SensorModel::new(h, w, az, el, rng.range_f64(20.0, 200.0)).expect("valid random sensor")
}

/// Random rigid pose with a few meters of translation.
pub fn random_pose(rng: &mut StreamRng) -> Pose {
    let q = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
    let t = Point::new(
        rng.range_f64(-50.0, 50.0),
        rng.range_f64(-50.0, 50.0),
        rng.range_f64(-2.0, 2.0),
    );
    Pose::from_quaternion(q, t)
}

/// Regular grid on the plane z = 0 with small in-plane jitter.
pub fn plane_cloud(rng: &mut StreamRng, side: usize, spacing: f64) -> Vec<Point> {
    let half = side as f64 * spacing / 2.0;
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            out.push(Point::new(
                i as f64 * spacing - half + rng.range_f64(-0.2, 0.2) * spacing,
                j as f64 * spacing - half + rng.range_f64(-0.2, 0.2) * spacing,
                0.0,
            ));
        }
    }
    out
}

/// `n` uniformly distributed points on the unit sphere.
pub fn sphere_cloud(rng: &mut StreamRng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| loop {
            let v = Point::new(rng.normal(), rng.normal(), rng.normal());
            let norm = v.norm();
            if norm > 1e-9 {
                break v / norm;
            }
        })
        .collect()
}

/// One tiny Gaussian centered on each of a checkerboard of cell-center rays,
/// so no ray meets more than one primitive. Ranges span 5 m to 40 m.
pub struct GaussianGrid {
    pub set: GaussianSet,
    pub sensor: SensorModel,
    pub pose: Pose,
    /// Cell index hit by each Gaussian.
    pub cells: Vec<usize>,
}

pub fn gaussian_grid(seed: u64) -> GaussianGrid {
    let sensor =
        SensorModel::new(16, 64, [-PI, PI], [-0.4, 0.4], 100.0).expect("valid grid sensor");
    let mut rng = StreamRng::new(seed);
    let mut gaussians = Vec::new();
    let mut cells = Vec::new();
    for row in 0..sensor.height() {
        for col in 0..sensor.width() {
            if (row + col) % 2 == 1 {
                continue;
            }
            let cell = Cell::new(row, col);
            let (az, el) = sensor.cell_center(cell);
            let range = rng.range_f64(5.0, 40.0);
            let mean = from_spherical(&SphericalPoint::new(az, el, range));
            let opacity = rng.range_f64(0.55, 0.95);
            let feature = rng.next_f64();
            gaussians.push(Gaussian::isotropic(mean, 1e-3 * range, opacity, feature));
            cells.push(cell.index(sensor.width()));
        }
    }
    GaussianGrid {
        set: GaussianSet::new(gaussians).expect("valid grid gaussians"),
        sensor,
        pose: Pose::identity(),
        cells,
    }
}
