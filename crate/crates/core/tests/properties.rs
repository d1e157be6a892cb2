//! Property checks over randomly generated inputs.

use std::f64::consts::PI;

use lidar_evs::curation::{self, FusionConfig, PseudoScan};
use lidar_evs::dropout::{self, RoiSpec};
use lidar_evs::geom::{from_spherical, spherical_jacobian, to_spherical, wrap_angle};
use lidar_evs::io;
use lidar_evs::metrics;
use lidar_evs::sensor::{project_to_cell, rasterize, RangeMap};
use lidar_evs::splat::{self, Gaussian, GaussianSet};
use lidar_evs::{LidarFrame, Point, Pose, SensorModel, SphericalPoint};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point> {
    (-60.0..60.0, -60.0..60.0, -8.0..8.0).prop_map(|(x, y, z)| Point::new(x, y, z))
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(point(), 1..max)
}

fn sensor() -> impl Strategy<Value = SensorModel> {
    (
        1usize..40,
        4usize..400,
        any::<bool>(),
        -PI..0.0,
        0.3..PI,
        -0.6..-0.05,
        0.05..0.5,
        10.0..120.0,
    )
        .prop_map(|(h, w, full, az0, span, el0, el1, max_range)| {
            let az = if full { [-PI, PI] } else { [az0, az0 + span] };
            SensorModel::new(h, w, az, [el0, el1], max_range).unwrap()
        })
}

fn pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform4(-1.0..1.0f64), point())
        .prop_filter("non-degenerate quaternion", |(q, _)| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
        .prop_map(|(q, t)| Pose::from_quaternion(q, t))
}

fn scan_of(points: Vec<Point>) -> PseudoScan {
    let n = points.len();
    PseudoScan {
        intensities: (0..n).map(|i| (i % 97) as f64 / 96.0).collect(),
        source_frame_ids: vec![0; n],
        points,
        normals: None,
    }
}

fn same_bits(a: &RangeMap, b: &RangeMap) -> bool {
    a.occupancy() == b.occupancy()
        && a.ranges()
            .iter()
            .zip(b.ranges())
            .all(|(x, y)| x.to_bits() == y.to_bits())
        && a.intensities()
            .iter()
            .zip(b.intensities())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_composition_is_associative(a in pose(), b in pose(), c in pose()) {
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        prop_assert!((left.matrix() - right.matrix()).amax() <= 1e-9);
    }

    #[test]
    fn rigid_transforms_preserve_distances(t in pose(), a in point(), b in point()) {
        let d = (t.transform_point(&a) - t.transform_point(&b)).norm();
        prop_assert!((d - (a - b).norm()).abs() <= 1e-9);
    }

    #[test]
    fn spherical_round_trip(az in -PI..PI, el in -1.4..1.4f64, r in 0.1..200.0f64) {
        let s = to_spherical(&from_spherical(&SphericalPoint::new(az, el, r))).unwrap();
        prop_assert!(wrap_angle(s.azimuth - az).abs() <= 1e-9);
        prop_assert!((s.elevation - el).abs() <= 1e-9);
        prop_assert!((s.range - r).abs() <= 1e-9 * r.max(1.0));
    }

    #[test]
    fn jacobian_matches_central_differences(az in -PI..PI, el in -1.3..1.3f64, r in 0.1..150.0f64) {
        let p = from_spherical(&SphericalPoint::new(az, el, r));
        let j = spherical_jacobian(&p).unwrap();
        let h = 1e-6 * r;
        for k in 0..3 {
            let mut e = Point::zeros();
            e[k] = h;
            let a = to_spherical(&(p + e)).unwrap();
            let b = to_spherical(&(p - e)).unwrap();
            let fd = [
                wrap_angle(a.azimuth - b.azimuth) / (2.0 * h),
                (a.elevation - b.elevation) / (2.0 * h),
                (a.range - b.range) / (2.0 * h),
            ];
            for (row, &f) in fd.iter().enumerate() {
                let exact = j[(row, k)];
                if exact.abs() >= 1e-3 {
                    prop_assert!(((f - exact) / exact).abs() <= 1e-5, "entry ({row},{k}): {f} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn rasterize_bounds_and_cell_minimum(points in cloud(400), m in sensor()) {
        let intensities = vec![0.5; points.len()];
        let map = rasterize(&points, &intensities, &m);
        prop_assert!(map.occupied_count() <= points.len().min(m.cell_count()));
        let mut best = vec![f64::INFINITY; m.cell_count()];
        for p in &points {
            let Ok(s) = to_spherical(p) else { continue };
            if s.range > m.max_range() {
                continue;
            }
            if let Some(c) = project_to_cell(&s, &m) {
                let i = c.index(m.width());
                best[i] = best[i].min(s.range);
            }
        }
        for (i, &b) in best.iter().enumerate() {
            prop_assert_eq!(map.occupancy()[i], b.is_finite());
            if b.is_finite() {
                prop_assert_eq!(map.ranges()[i], b);
            }
        }
    }

    /// Exact duplicates are removed first: a tie between them is settled by
    /// input index, which shuffling changes.
    #[test]
    fn rasterize_is_permutation_invariant(points in cloud(300), m in sensor(), seed in any::<u64>()) {
        let mut points = points;
        points.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z)));
        points.dedup();
        let n = points.len();
        let intensities: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = lidar_evs::rng::StreamRng::new(seed);
        for i in (1..n).rev() {
            order.swap(i, (rng.next_u64() % (i as u64 + 1)) as usize);
        }
        let shuffled: Vec<Point> = order.iter().map(|&i| points[i]).collect();
        let shuffled_i: Vec<f64> = order.iter().map(|&i| intensities[i]).collect();
        let a = rasterize(&points, &intensities, &m);
        let b = rasterize(&shuffled, &shuffled_i, &m);
        // Distinct points can still tie on range, so intensities may differ.
        prop_assert_eq!(a.occupancy(), b.occupancy());
        prop_assert!(a.ranges().iter().zip(b.ranges()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn curl_keeps_one_nearest_point_per_cell(points in cloud(400), m in sensor()) {
        let scan = scan_of(points);
        let curled = curation::occlusion_curl(&scan, &m);
        let mut seen = vec![false; m.cell_count()];
        for p in &curled.points {
            let s = to_spherical(p).unwrap();
            let c = project_to_cell(&s, &m).unwrap().index(m.width());
            prop_assert!(!seen[c], "two survivors share cell {}", c);
            seen[c] = true;
        }
        let before = rasterize(&scan.points, &scan.intensities, &m);
        let after = rasterize(&curled.points, &curled.intensities, &m);
        prop_assert!(same_bits(&before, &after));
    }

    #[test]
    fn curl_is_idempotent(points in cloud(400), m in sensor()) {
        let once = curation::occlusion_curl(&scan_of(points), &m);
        let twice = curation::occlusion_curl(&once, &m);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn adjusted_intensity_stays_in_unit_range(
        n in point(), a in point(), b in point(), i in 0.0..=1.0f64
    ) {
        prop_assume!(n.norm() > 1e-6 && a.norm() > 1e-6 && b.norm() > 1e-6);
        let v = curation::adjust_intensity(i, &n.normalize(), &a, &b).value;
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(curation::adjust_intensity(i, &n.normalize(), &a, &a).value, i);
    }

    #[test]
    fn fusion_takes_dynamic_points_only_from_current(
        flags in prop::collection::vec(any::<bool>(), 5 * 20),
        current in 0usize..5,
        window in 1usize..6,
    ) {
        let frames: Vec<LidarFrame> = (0..5)
            .map(|f| {
                let points: Vec<Point> = (0..20).map(|i| Point::new(1.0 + i as f64, f as f64, 0.0)).collect();
                LidarFrame::new(points, vec![0.5; 20], flags[f * 20..(f + 1) * 20].to_vec(),
                    Pose::from_translation(Point::new(f as f64, 0.0, 0.0)), f as i64 * 10).unwrap()
            })
            .collect();
        let fused = curation::fuse(&frames, current, &FusionConfig::with_window(window)).unwrap();
        let from_current = fused.source_frame_ids.iter().filter(|&&id| id as usize == current).count();
        prop_assert_eq!(from_current, 20);
        for (p, &id) in fused.points.iter().zip(&fused.source_frame_ids) {
            let f = id as usize;
            if f == current {
                continue;
            }
            // Frame f's point i sits at x = 1 + i + f in the world.
            let i = (p.x - 1.0 - f as f64).round() as usize;
            prop_assert!(!flags[f * 20 + i], "dynamic point {} of frame {} fused", i, f);
        }
    }

    #[test]
    fn dropout_never_drops_outside_roi(
        means in cloud(300), rate in 0.0..0.99f64, seed in any::<u64>(), d_max in 1.0..80.0f64
    ) {
        let spec = RoiSpec::new(d_max, -0.3, 0.2, rate).unwrap();
        let roi = dropout::roi_mask(&means, &Pose::identity(), &spec);
        let mask = dropout::sample_mask(&roi, rate, seed);
        prop_assert!(mask.drop.iter().zip(&roi).all(|(&d, &r)| !d || r));
        prop_assert_eq!(&mask, &dropout::sample_mask(&roi, rate, seed));
        let opacities: Vec<f64> = (0..means.len()).map(|i| 0.05 + (i % 19) as f64 / 20.0).collect();
        let comp = dropout::compensate_opacity(&opacities, &roi, rate);
        for ((o, c), &r) in opacities.iter().zip(&comp).zip(&roi) {
            if !r {
                prop_assert_eq!(o.to_bits(), c.to_bits());
            }
        }
    }

    #[test]
    fn chamfer_symmetry_and_rigid_invariance(a in cloud(200), b in cloud(200), t in pose()) {
        let ab = metrics::chamfer(&a, &b).unwrap();
        prop_assert!((ab - metrics::chamfer(&b, &a).unwrap()).abs() <= 1e-12);
        let moved = metrics::chamfer(&t.transform_points(&a), &t.transform_points(&b)).unwrap();
        prop_assert!((ab - moved).abs() <= 1e-9);
        prop_assert_eq!(metrics::chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_perfect_on_identical_maps(points in cloud(300), m in sensor()) {
        let intensities: Vec<f64> = (0..points.len()).map(|i| (i % 7) as f64 / 7.0).collect();
        let map = rasterize(&points, &intensities, &m);
        prop_assert_eq!(metrics::raydrop_accuracy(&map, &map).unwrap(), 1.0);
        if map.occupied_count() > 0 {
            prop_assert_eq!(metrics::depth_error(&map, &map).unwrap(), 0.0);
            prop_assert_eq!(metrics::intensity_rmse(&map, &map).unwrap(), 0.0);
        }
    }
}

fn gaussians() -> impl Strategy<Value = Vec<Gaussian>> {
    prop::collection::vec((point(), 0.02..1.5f64, 0.02..0.99f64, 0.0..1.0f64), 1..80).prop_map(
        |gs| {
            gs.into_iter()
                .map(|(m, s, o, f)| Gaussian::isotropic(m, s, o, f))
                .collect()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn render_blends_convexly(gs in gaussians(), t in pose()) {
        let m = SensorModel::new(16, 128, [-PI, PI], [-0.5, 0.4], 150.0).unwrap();
        let set = GaussianSet::new(gs).unwrap();
        let r = splat::render_range_map(&set, &t, &m);
        let ranges: Vec<f64> = set.means().iter().map(|p| (p - t.translation()).norm()).collect();
        let lo = ranges.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ranges.iter().cloned().fold(0.0, f64::max);
        for i in 0..m.cell_count() {
            prop_assert!((0.0..1.0).contains(&r.alpha[i]));
            if r.map.occupancy()[i] {
                let v = r.map.ranges()[i];
                prop_assert!(v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12));
                prop_assert!((0.0..=1.0).contains(&r.map.intensities()[i]));
            }
        }
    }

    #[test]
    fn render_is_permutation_invariant(gs in gaussians(), seed in any::<u64>()) {
        let m = SensorModel::new(8, 64, [-PI, PI], [-0.5, 0.4], 150.0).unwrap();
        let mut order: Vec<usize> = (0..gs.len()).collect();
        let mut rng = lidar_evs::rng::StreamRng::new(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, (rng.next_u64() % (i as u64 + 1)) as usize);
        }
        let shuffled: Vec<Gaussian> = order.iter().map(|&i| gs[i]).collect();
        let a = splat::render_range_map(&GaussianSet::new(gs).unwrap(), &Pose::identity(), &m);
        let b = splat::render_range_map(&GaussianSet::new(shuffled).unwrap(), &Pose::identity(), &m);
        prop_assert!(same_bits(&a.map, &b.map));
        prop_assert!(a.alpha.iter().zip(&b.alpha).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn binary_formats_round_trip(points in cloud(200), t in pose(), ts in any::<i64>(), gs in gaussians()) {
        let n = points.len();
        let frame = LidarFrame::new(points, (0..n).map(|i| (i % 5) as f64 / 4.0).collect(),
            (0..n).map(|i| i % 3 == 0).collect(), t, ts).unwrap();
        let bytes = io::encode_levp(&frame);
        prop_assert_eq!(&io::encode_levp(&io::decode_levp(&bytes).unwrap()), &bytes);

        let m = SensorModel::new(8, 32, [-PI, PI], [-0.5, 0.4], 150.0).unwrap();
        let map = rasterize(frame.points(), frame.intensities(), &m);
        let bytes = io::encode_levr(&map);
        prop_assert_eq!(&io::encode_levr(&io::decode_levr(&bytes).unwrap()), &bytes);

        let set = GaussianSet::new(gs).unwrap();
        let bytes = io::encode_levg(&set);
        prop_assert_eq!(&io::encode_levg(&io::decode_levg(&bytes).unwrap()), &bytes);
    }
}
