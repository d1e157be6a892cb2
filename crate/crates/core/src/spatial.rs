//! Exact nearest-neighbour queries over a static point set.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};

use crate::geom::Point;

pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl PointIndex {
    pub fn new(points: &[Point]) -> Self {
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Self {
            tree: ImmutableKdTree::new_from_slice(&coords),
            len: points.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index of and Euclidean distance to the closest point.
    pub fn nearest(&self, q: &Point) -> (usize, f64) {
        assert!(self.len > 0, "nearest() on an empty index");
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
        (nn.item as usize, nn.distance.sqrt())
    }

    /// Indices of the `k` closest points, nearest first.
    pub fn knn(&self, q: &Point, k: usize) -> Vec<usize> {
        let Some(k) = NonZero::new(k.min(self.len)) else {
            return Vec::new();
        };
        self.tree
            .nearest_n::<SquaredEuclidean>(&[q.x, q.y, q.z], k)
            .into_iter()
            .map(|n| n.item as usize)
            .collect()
    }
}
