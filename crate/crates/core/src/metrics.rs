//! Scan-level evaluation metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::Point;
use crate::sensor::RangeMap;
use crate::spatial::PointIndex;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("range maps differ in size: {pred:?} vs {gt:?}")]
    DimensionMismatch {
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("no cell is occupied in both range maps")]
    NoOverlap,
    #[error("chamfer distance needs two non-empty clouds")]
    EmptyCloud,
}

/// Metric bundle. Fields not applicable to the input kind are omitted when
/// serialized.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LidarMetrics {
    /// Median squared range error on jointly occupied cells, m².
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_mse_median: Option<f64>,
    /// Meters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chamfer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intensity_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raydrop_accuracy: Option<f64>,
}

fn check_dims(pred: &RangeMap, gt: &RangeMap) -> Result<(), MetricsError> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(MetricsError::DimensionMismatch {
            pred: (pred.height(), pred.width()),
            gt: (gt.height(), gt.width()),
        });
    }
    Ok(())
}

fn joint_cells<'a>(pred: &'a RangeMap, gt: &'a RangeMap) -> impl Iterator<Item = usize> + 'a {
    pred.occupancy()
        .iter()
        .zip(gt.occupancy())
        .enumerate()
        .filter_map(|(i, (&a, &b))| (a && b).then_some(i))
}

/// Median with the even-count convention of averaging the two middle values.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

pub fn depth_error(pred: &RangeMap, gt: &RangeMap) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let mut sq: Vec<f64> = joint_cells(pred, gt)
        .map(|i| {
            let d = pred.ranges()[i] - gt.ranges()[i];
            d * d
        })
        .collect();
    median(&mut sq).ok_or(MetricsError::NoOverlap)
}

pub fn intensity_rmse(pred: &RangeMap, gt: &RangeMap) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let (sum, n) = joint_cells(pred, gt).fold((0.0, 0usize), |(s, n), i| {
        let d = pred.intensities()[i] - gt.intensities()[i];
        (s + d * d, n + 1)
    });
    if n == 0 {
        return Err(MetricsError::NoOverlap);
    }
    Ok((sum / n as f64).sqrt())
}

/// Fraction of all cells whose hit/no-hit state agrees.
pub fn raydrop_accuracy(pred: &RangeMap, gt: &RangeMap) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let agree = pred
        .occupancy()
        .iter()
        .zip(gt.occupancy())
        .filter(|(a, b)| a == b)
        .count();
    Ok(agree as f64 / pred.len() as f64)
}

fn mean_nn_distance(queries: &[Point], index: &PointIndex) -> f64 {
    let sum: f64 = queries
        .par_iter()
        .with_min_len(1024)
        .map(|q| index.nearest(q).1)
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    sum / queries.len() as f64
}

/// Symmetric Chamfer distance with first-power Euclidean distances:
/// `½ (mean_a min_b |a − b| + mean_b min_a |a − b|)`.
pub fn chamfer(pred: &[Point], gt: &[Point]) -> Result<f64, MetricsError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let pred_index = PointIndex::new(pred);
    let gt_index = PointIndex::new(gt);
    Ok(0.5 * (mean_nn_distance(pred, &gt_index) + mean_nn_distance(gt, &pred_index)))
}

/// All range-map metrics; Chamfer is computed on the back-projected cells.
/// Depth and intensity are left out when no cell overlaps.
pub fn evaluate_range_maps(
    pred: &RangeMap,
    gt: &RangeMap,
    sensor: &crate::sensor::SensorModel,
) -> Result<LidarMetrics, MetricsError> {
    check_dims(pred, gt)?;
    let overlap = |r: Result<f64, MetricsError>| match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::NoOverlap) => Ok(None),
        Err(e) => Err(e),
    };
    let chamfer = match chamfer(&pred.to_points(sensor), &gt.to_points(sensor)) {
        Ok(v) => Some(v),
        Err(MetricsError::EmptyCloud) => None,
        Err(e) => return Err(e),
    };
    Ok(LidarMetrics {
        depth_mse_median: overlap(depth_error(pred, gt))?,
        chamfer,
        intensity_rmse: overlap(intensity_rmse(pred, gt))?,
        raydrop_accuracy: Some(raydrop_accuracy(pred, gt)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn map(ranges: &[f64], intensities: &[f64]) -> RangeMap {
        let occ: Vec<bool> = ranges.iter().map(|&r| r > 0.0).collect();
        RangeMap::from_channels(1, ranges.len(), ranges.to_vec(), intensities.to_vec(), occ)
            .unwrap()
    }

    #[test]
    fn median_convention() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn depth_examples() {
        let gt = map(&[0.1, 0.1, 0.1, 0.1], &[0.0; 4]);
        assert_eq!(depth_error(&gt, &gt).unwrap(), 0.0);
        // 0.2 − 0.1 is exactly 0.1 in binary floating point.
        let pred = map(&[0.2, 0.2, 0.2, 0.2], &[0.0; 4]);
        assert_eq!(depth_error(&pred, &gt).unwrap(), 0.1 * 0.1);
        let pred = map(&[0.2, 0.2, 0.4, 0.4], &[0.0; 4]);
        assert_abs_diff_eq!(depth_error(&pred, &gt).unwrap(), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn depth_ignores_unshared_cells() {
        let gt = map(&[5.0, -1.0, 5.0], &[0.5, 0.0, 0.5]);
        let pred = map(&[5.0, 9.0, -1.0], &[0.5, 0.5, 0.0]);
        assert_eq!(depth_error(&pred, &gt).unwrap(), 0.0);
        let empty = map(&[-1.0, -1.0, -1.0], &[0.0; 3]);
        assert_eq!(depth_error(&empty, &gt), Err(MetricsError::NoOverlap));
        assert_eq!(intensity_rmse(&empty, &gt), Err(MetricsError::NoOverlap));
    }

    #[test]
    fn rmse_examples() {
        let gt = map(&[5.0; 4], &[0.5; 4]);
        assert_eq!(intensity_rmse(&gt, &gt).unwrap(), 0.0);
        let pred = map(&[5.0; 4], &[0.6; 4]);
        assert_abs_diff_eq!(intensity_rmse(&pred, &gt).unwrap(), 0.1, epsilon = 1e-12);
        let gt = map(&[5.0; 4], &[0.0; 4]);
        let pred = map(&[5.0; 4], &[0.0, 0.2, 0.0, 0.2]);
        assert_abs_diff_eq!(
            intensity_rmse(&pred, &gt).unwrap(),
            0.02f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn raydrop_examples() {
        let a = map(&[5.0, -1.0, 5.0, -1.0], &[0.5, 0.0, 0.5, 0.0]);
        let b = map(&[-1.0, 5.0, -1.0, 5.0], &[0.0, 0.5, 0.0, 0.5]);
        assert_eq!(raydrop_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(raydrop_accuracy(&a, &b).unwrap(), 0.0);
        let small = RangeMap::empty(1, 2);
        assert!(matches!(
            raydrop_accuracy(&a, &small),
            Err(MetricsError::DimensionMismatch { .. })
        ));
        assert!(depth_error(&a, &small).is_err());
        assert!(intensity_rmse(&a, &small).is_err());
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Point::new(1.0, 2.0, 3.0), Point::new(-1.0, 0.0, 4.0)];
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let t = Point::new(0.3, -0.4, 1.2);
        let p = Point::new(1.0, 1.0, 1.0);
        assert_abs_diff_eq!(chamfer(&[p], &[p + t]).unwrap(), t.norm(), epsilon = 1e-15);
        assert_eq!(chamfer(&[], &a), Err(MetricsError::EmptyCloud));
    }

    #[test]
    fn metrics_json_omits_missing_fields() {
        let m = LidarMetrics {
            chamfer: Some(0.5),
            ..Default::default()
        };
        assert_eq!(serde_json::to_string(&m).unwrap(), r#"{"chamfer":0.5}"#);
    }
}
