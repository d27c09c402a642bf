use nalgebra::Point3;

/// Static 3-d tree over a vertex set for nearest-vertex lookups.
///
/// Ties in distance resolve to the lowest vertex index, matching a linear
/// scan that keeps the first minimum.
#[derive(Debug, Clone)]
pub struct VertexIndex {
    points: Vec<Point3<f64>>,
    // implicit balanced tree: order[mid] is the splitting point of each range
    order: Vec<u32>,
    axes: Vec<u8>,
}

impl VertexIndex {
    pub fn new(points: &[Point3<f64>]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axes = vec![0u8; points.len()];
        build(points, &mut order, &mut axes, 0);
        Self {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(index, squared distance)` of the nearest vertex, or `None` when empty.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(u32, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (u32::MAX, f64::INFINITY);
        self.search(0, self.order.len(), q, &mut best);
        Some(best)
    }

    fn search(&self, lo: usize, hi: usize, q: &Point3<f64>, best: &mut (u32, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx as usize];
        let d = (p - q).norm_squared();
        if d < best.1 || (d == best.1 && idx < best.0) {
            *best = (idx, d);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, best);
        // `<=` so equal-distance points with lower indices are still visited
        if diff * diff <= best.1 {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn build(points: &[Point3<f64>], order: &mut [u32], axes: &mut [u8], depth: usize) {
    if order.len() <= 1 {
        if let Some(a) = axes.first_mut() {
            *a = (depth % 3) as u8;
        }
        return;
    }
    // split on the axis of largest spread
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(points[i as usize][k]);
            hi[k] = hi[k].max(points[i as usize][k]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis].total_cmp(&points[b as usize][axis])
    });
    axes[mid] = axis as u8;
    let (left, right) = order.split_at_mut(mid);
    let (left_axes, right_axes) = axes.split_at_mut(mid);
    build(points, left, left_axes, depth + 1);
    build(points, &mut right[1..], &mut right_axes[1..], depth + 1);
}
