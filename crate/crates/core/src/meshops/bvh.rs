use nalgebra::{Point3, Vector3};

use super::TriMesh;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Point3<f64>,
    max: Point3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Point3::from([f64::INFINITY; 3]),
            max: Point3::from([f64::NEG_INFINITY; 3]),
        }
    }

    fn grow(&mut self, p: &Point3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn distance_sq(&self, p: &Point3<f64>) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, count: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Result of a closest-point query against a triangle set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestHit {
    pub point: Point3<f64>,
    pub distance: f64,
    pub face: usize,
}

/// Bounding-volume hierarchy over mesh triangles for exact closest-point
/// queries.
#[derive(Debug, Clone)]
pub struct TriangleBvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
    triangles: Vec<[Point3<f64>; 3]>,
}

impl TriangleBvh {
    pub fn new(mesh: &TriMesh) -> Self {
        let triangles: Vec<_> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        Self::from_triangles(triangles)
    }

    pub fn from_triangles(triangles: Vec<[Point3<f64>; 3]>) -> Self {
        let centroids: Vec<Point3<f64>> = triangles
            .iter()
            .map(|t| Point3::from((t[0].coords + t[1].coords + t[2].coords) / 3.0))
            .collect();
        let mut bvh = Self {
            nodes: Vec::new(),
            order: (0..triangles.len()).collect(),
            triangles,
        };
        if !bvh.triangles.is_empty() {
            let n = bvh.order.len();
            bvh.build(0, n, &centroids);
        }
        bvh
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Point3<f64>]) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &t in &self.order[start..end] {
            for p in &self.triangles[t] {
                bounds.grow(p);
            }
            cbounds.grow(&centroids[t]);
        }
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                bounds,
                start,
                count: end - start,
            });
            return id;
        }
        let extent = cbounds.max - cbounds.min;
        let axis = extent.imax();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis])
        });
        // placeholder, patched after children are built
        self.nodes.push(Node::Leaf {
            bounds,
            start,
            count: 0,
        });
        let left = self.build(start, mid, centroids);
        let right = self.build(mid, end, centroids);
        self.nodes[id] = Node::Inner { bounds, left, right };
        id
    }

    /// Exact closest point on any triangle. Returns `None` for an empty set.
    pub fn closest_point(&self, p: &Point3<f64>) -> Option<ClosestHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = ClosestHit {
            point: *p,
            distance: f64::INFINITY,
            face: usize::MAX,
        };
        let mut best_sq = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.bounds().distance_sq(p) > best_sq {
                continue;
            }
            match *node {
                Node::Leaf { start, count, .. } => {
                    for &t in &self.order[start..start + count] {
                        let [a, b, c] = self.triangles[t];
                        let q = closest_point_on_triangle(p, &a, &b, &c);
                        let d = (q - p).norm_squared();
                        if d < best_sq || (d == best_sq && t < best.face) {
                            best_sq = d;
                            best = ClosestHit {
                                point: q,
                                distance: d.sqrt(),
                                face: t,
                            };
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[left].bounds().distance_sq(p);
                    let dr = self.nodes[right].bounds().distance_sq(p);
                    // nearer child on top of the stack
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        Some(best)
    }
}

/// Closest point to `p` on triangle `abc` (Voronoi-region walk).
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab: Vector3<f64> = b - a;
    let ac: Vector3<f64> = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let denom = d1 - d3;
        let v = if denom != 0.0 { d1 / denom } else { 0.0 };
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let denom = d2 - d6;
        let w = if denom != 0.0 { d2 / denom } else { 0.0 };
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let denom = (d4 - d3) + (d5 - d6);
        let w = if denom != 0.0 { (d4 - d3) / denom } else { 0.0 };
        return b + (c - b) * w;
    }
    let sum = va + vb + vc;
    if sum == 0.0 {
        // degenerate triangle: fall back to the closest vertex
        return *[a, b, c]
            .into_iter()
            .min_by(|x, y| (*x - p).norm_squared().total_cmp(&(*y - p).norm_squared()))
            .unwrap();
    }
    let denom = 1.0 / sum;
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshops::primitives;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_point(rng: &mut ChaCha8Rng, s: f64) -> Point3<f64> {
        Point3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    /// Dense barycentric sampling of the triangle; an upper bound on the true
    /// distance that converges from above.
    fn sampled_distance(p: &Point3<f64>, t: &[Point3<f64>; 3], n: usize) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
                let q = t[0] + (t[1] - t[0]) * u + (t[2] - t[0]) * v;
                best = best.min((q - p).norm());
            }
        }
        best
    }

    #[test]
    fn point_triangle_distance_matches_dense_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let tri = [
                rand_point(&mut rng, 1.0),
                rand_point(&mut rng, 1.0),
                rand_point(&mut rng, 1.0),
            ];
            let p = rand_point(&mut rng, 1.5);
            let exact = (closest_point_on_triangle(&p, &tri[0], &tri[1], &tri[2]) - p).norm();
            let sampled = sampled_distance(&p, &tri, 600);
            assert!(exact <= sampled + 1e-12);
            assert!(sampled - exact < 1e-4, "exact {exact} sampled {sampled}");
        }
    }

    #[test]
    fn bvh_matches_linear_scan() {
        let mesh = primitives::icosphere(1.0, 3);
        let bvh = TriangleBvh::new(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let p = rand_point(&mut rng, 2.0);
            let hit = bvh.closest_point(&p).unwrap();
            let brute = (0..mesh.faces.len())
                .map(|f| {
                    let [a, b, c] = mesh.triangle(f);
                    (closest_point_on_triangle(&p, &a, &b, &c) - p).norm()
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(hit.distance, brute);
        }
    }

    #[test]
    fn empty_bvh_has_no_hits() {
        let bvh = TriangleBvh::from_triangles(Vec::new());
        assert!(bvh.closest_point(&Point3::origin()).is_none());
    }
}
