use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GeometryError, Vec3};

/// Points in the world frame, meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<Vec3>>,
}

/// Clouds above this size are subsampled before Chamfer evaluation.
pub const CHAMFER_MAX_POINTS: usize = 4096;

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { points, colors: None })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
        self.colors = None;
    }

    /// Uniform subsample without replacement; a no-op at or below `max`.
    pub fn subsample(&self, max: usize, seed: u64) -> PointCloud {
        if self.points.len() <= max {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.points.len(), max).into_vec();
        idx.sort_unstable();
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            colors: self.colors.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Static 3-d tree over a point set for nearest-neighbor queries.
pub struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build_rec(points, &mut order, 0);
        Self { points, order }
    }

    /// Euclidean distance to the nearest stored point.
    pub fn nearest_distance(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(&self.order, 0, q, &mut best);
        best.sqrt()
    }

    fn search(&self, slice: &[usize], depth: usize, q: Vec3, best: &mut f64) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let p = self.points[slice[mid]];
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if d2 < *best {
            *best = d2;
        }
        let axis = depth % 3;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 { (&slice[..mid], &slice[mid + 1..]) } else { (&slice[mid + 1..], &slice[..mid]) };
        self.search(near, depth + 1, q, best);
        if delta * delta < *best {
            self.search(far, depth + 1, q, best);
        }
    }
}

fn build_rec(points: &[Vec3], idx: &mut [usize], depth: usize) {
    if idx.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = idx.len() / 2;
    idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let (left, right) = idx.split_at_mut(mid);
    build_rec(points, left, depth + 1);
    build_rec(points, &mut right[1..], depth + 1);
}

fn mean_nn(from: &[Vec3], to: &KdTree<'_>) -> f64 {
    from.iter().map(|&p| to.nearest_distance(p)).sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer distance in meters:
/// `0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|)`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, GeometryError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let (ta, tb) = (KdTree::build(&a.points), KdTree::build(&b.points));
    Ok(0.5 * (mean_nn(&a.points, &tb) + mean_nn(&b.points, &ta)))
}

/// [`chamfer`] after subsampling both clouds to at most
/// [`CHAMFER_MAX_POINTS`] with the given seed.
pub fn chamfer_bounded(a: &PointCloud, b: &PointCloud, seed: u64) -> Result<f64, GeometryError> {
    let sa = a.subsample(CHAMFER_MAX_POINTS, seed);
    let sb = b.subsample(CHAMFER_MAX_POINTS, seed ^ 0x9e37_79b9_7f4a_7c15);
    chamfer(&sa, &sb)
}
