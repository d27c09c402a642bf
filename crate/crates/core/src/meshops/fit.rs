//! Robust ground-plane and stand-circle fitting (RANSAC + least-squares refit).

use nalgebra::{Matrix3, Point2, Point3, SymmetricEigen, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Circle3D, Plane, DEFAULT_RANSAC_ITERATIONS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub plane: Plane,
    pub inliers: usize,
    /// RMS point-to-plane distance over the inlier set.
    pub rms_residual: f64,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleFit {
    pub circle: Circle3D,
    pub inliers: usize,
    /// RMS radial residual over the inlier set.
    pub rms_residual: f64,
    pub iterations: usize,
    pub seed: u64,
}

/// Serializable summary of a fit, written into sidecars.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitSummary {
    pub inliers: usize,
    pub rms_residual: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl From<&PlaneFit> for FitSummary {
    fn from(f: &PlaneFit) -> Self {
        Self {
            inliers: f.inliers,
            rms_residual: f.rms_residual,
            iterations: f.iterations,
            seed: f.seed,
        }
    }
}

impl From<&CircleFit> for FitSummary {
    fn from(f: &CircleFit) -> Self {
        Self {
            inliers: f.inliers,
            rms_residual: f.rms_residual,
            iterations: f.iterations,
            seed: f.seed,
        }
    }
}

fn centroid(points: &[Point3<f64>]) -> Point3<f64> {
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Point3::from(sum / points.len() as f64)
}

fn covariance_eigen(points: &[Point3<f64>], center: &Point3<f64>) -> SymmetricEigen<f64, nalgebra::U3> {
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - center;
        cov += d * d.transpose();
    }
    SymmetricEigen::new(cov / points.len() as f64)
}

/// Least-squares plane through `points`: the eigenvector of the smallest
/// covariance eigenvalue. `None` when the points are (numerically) collinear.
fn least_squares_plane(points: &[Point3<f64>]) -> Option<Plane> {
    if points.len() < 3 {
        return None;
    }
    let c = centroid(points);
    let eig = covariance_eigen(points, &c);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l_min, l_mid, l_max) = (
        eig.eigenvalues[idx[0]],
        eig.eigenvalues[idx[1]],
        eig.eigenvalues[idx[2]],
    );
    if !(l_max > 0.0) || l_mid <= 1e-12 * l_max {
        return None;
    }
    let _ = l_min;
    let n: Vector3<f64> = eig.eigenvectors.column(idx[0]).into_owned();
    Plane::through(&c, n).ok()
}

/// Fits the dominant plane of a point cloud. The normal is oriented so the
/// majority of off-plane points lie on its positive side (body above ground).
pub fn fit_ground_plane(
    points: &[Point3<f64>],
    inlier_tol: f64,
    iterations: usize,
    seed: u64,
) -> Result<PlaneFit> {
    if points.len() < 3 {
        return Err(Error::Fit(format!("plane fit needs at least 3 points, got {}", points.len())));
    }
    if !(inlier_tol > 0.0) || iterations == 0 {
        return Err(Error::param("plane fit needs a positive tolerance and iteration count"));
    }
    if least_squares_plane(points).is_none() {
        return Err(Error::Fit("points are collinear; the plane is undetermined".into()));
    }
    let scale = {
        let c = centroid(points);
        points.iter().map(|p| (p - c).norm()).fold(0.0, f64::max)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..iterations {
        let pick = sample(&mut rng, points.len(), 3);
        let (a, b, c) = (points[pick.index(0)], points[pick.index(1)], points[pick.index(2)]);
        let n = (b - a).cross(&(c - a));
        if n.norm() <= 1e-12 * scale * scale {
            continue;
        }
        let Ok(plane) = Plane::through(&a, n) else { continue };
        let count = points
            .iter()
            .filter(|p| plane.signed_distance(p).abs() <= inlier_tol)
            .count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, plane));
        }
    }
    let Some((_, hypothesis)) = best else {
        return Err(Error::Fit("no non-degenerate plane hypothesis was sampled".into()));
    };

    let inliers: Vec<Point3<f64>> = points
        .iter()
        .filter(|p| hypothesis.signed_distance(p).abs() <= inlier_tol)
        .copied()
        .collect();
    let mut plane = least_squares_plane(&inliers).unwrap_or(hypothesis);

    let (mut above, mut below) = (0usize, 0usize);
    for p in points {
        let d = plane.signed_distance(p);
        if d > inlier_tol {
            above += 1;
        } else if d < -inlier_tol {
            below += 1;
        }
    }
    let flip = if above != below {
        below > above
    } else {
        // no majority: make the dominant normal component positive
        let k = plane.normal.iamax();
        plane.normal[k] < 0.0
    };
    if flip {
        plane = Plane {
            normal: -plane.normal,
            offset: -plane.offset,
        };
    }
    let rms = (inliers.iter().map(|p| plane.signed_distance(p).powi(2)).sum::<f64>()
        / inliers.len().max(1) as f64)
        .sqrt();
    Ok(PlaneFit {
        plane,
        inliers: inliers.len(),
        rms_residual: rms,
        iterations,
        seed,
    })
}

/// Circle through three 2-D points, or `None` when they are collinear.
fn circumcircle(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> Option<(Point2<f64>, f64)> {
    let (bx, by) = (b.x - a.x, b.y - a.y);
    let (cx, cy) = (c.x - a.x, c.y - a.y);
    let d = 2.0 * (bx * cy - by * cx);
    let scale = (bx * bx + by * by).max(cx * cx + cy * cy);
    if d.abs() <= 1e-12 * scale || scale == 0.0 {
        return None;
    }
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    let ux = (cy * b2 - by * c2) / d;
    let uy = (bx * c2 - cx * b2) / d;
    let center = Point2::new(a.x + ux, a.y + uy);
    Some((center, (ux * ux + uy * uy).sqrt()))
}

/// Algebraic (Kåsa) circle fit: least squares on `x² + y² + Dx + Ey + F = 0`.
pub(crate) fn kasa_fit(points: &[Point2<f64>]) -> Option<(Point2<f64>, f64)> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |acc, p| acc + p.coords) / n;
    // centered coordinates keep the normal equations well conditioned
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in points {
        let (x, y) = (p.x - mean.x, p.y - mean.y);
        let row = Vector3::new(x, y, 1.0);
        ata += row * row.transpose();
        atb += row * (-(x * x + y * y));
    }
    let sol = ata.lu().solve(&atb)?;
    let (cx, cy) = (-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = cx * cx + cy * cy - sol[2];
    if !(r2 > 0.0) {
        return None;
    }
    Some((Point2::new(cx + mean.x, cy + mean.y), r2.sqrt()))
}

/// Fits the stand rim: points within `band` of the ground plane are projected
/// onto it and a circle is found by RANSAC over circumcircles (inlier
/// tolerance `band / 2`) followed by a Kåsa refit on the inliers.
pub fn fit_stand_circle(points: &[Point3<f64>], ground: &Plane, band: f64, seed: u64) -> Result<CircleFit> {
    fit_stand_circle_with(points, ground, band, DEFAULT_RANSAC_ITERATIONS, seed)
}

pub fn fit_stand_circle_with(
    points: &[Point3<f64>],
    ground: &Plane,
    band: f64,
    iterations: usize,
    seed: u64,
) -> Result<CircleFit> {
    if !(band > 0.0) || iterations == 0 {
        return Err(Error::param("circle fit needs a positive band and iteration count"));
    }
    let (u, v) = ground.basis();
    let anchor = ground.anchor();
    let flat: Vec<Point2<f64>> = points
        .iter()
        .filter(|p| ground.signed_distance(p).abs() <= band)
        .map(|p| {
            let d = ground.project(p) - anchor;
            Point2::new(d.dot(&u), d.dot(&v))
        })
        .collect();
    if flat.len() < 3 {
        return Err(Error::Fit(format!(
            "circle fit needs at least 3 points near the ground, got {}",
            flat.len()
        )));
    }
    let tol = band / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Point2<f64>, f64)> = None;
    for _ in 0..iterations {
        let pick = sample(&mut rng, flat.len(), 3);
        let Some((c, r)) = circumcircle(&flat[pick.index(0)], &flat[pick.index(1)], &flat[pick.index(2)])
        else {
            continue;
        };
        let count = flat
            .iter()
            .filter(|p| ((*p - c).norm() - r).abs() <= tol)
            .count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, c, r));
        }
    }
    let Some((_, c0, r0)) = best else {
        return Err(Error::Fit("near-ground points are collinear; no circle hypothesis".into()));
    };
    let inliers: Vec<Point2<f64>> = flat
        .iter()
        .filter(|p| ((*p - c0).norm() - r0).abs() <= tol)
        .copied()
        .collect();
    let (c, r) = kasa_fit(&inliers).unwrap_or((c0, r0));
    let rms = (inliers.iter().map(|p| ((p - c).norm() - r).powi(2)).sum::<f64>()
        / inliers.len().max(1) as f64)
        .sqrt();
    let center = anchor + u * c.x + v * c.y;
    Ok(CircleFit {
        circle: Circle3D {
            center,
            radius: r,
            plane: *ground,
        },
        inliers: inliers.len(),
        rms_residual: rms,
        iterations,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn ground_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn exact_ground_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = ground_points(100, &mut rng);
        let fit = fit_ground_plane(&pts, 0.01, DEFAULT_RANSAC_ITERATIONS, 7).unwrap();
        assert!((fit.plane.normal - Vector3::y()).norm() < 1e-9);
        assert!(fit.plane.offset.abs() < 1e-9);
        assert_eq!(fit.inliers, 100);
    }

    #[test]
    fn ground_plane_with_outliers_above() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = ground_points(90, &mut rng);
        let inliers = pts.clone();
        for _ in 0..10 {
            pts.push(Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..2.0),
                rng.random_range(-1.0..1.0),
            ));
        }
        let reference = least_squares_plane(&inliers).unwrap();
        let fit = fit_ground_plane(&pts, 0.01, DEFAULT_RANSAC_ITERATIONS, 3).unwrap();
        assert!(fit.plane.normal.y > 0.0, "body side must be positive");
        assert!((fit.plane.normal.dot(&reference.normal).abs() - 1.0).abs() < 1e-3);
        assert!((fit.plane.offset.abs() - reference.offset.abs()).abs() < 1e-3);
        assert!((fit.plane.normal - Vector3::y()).norm() < 1e-3);
    }

    #[test]
    fn tilted_plane_orientation_follows_majority() {
        let n = Vector3::new(0.2, 1.0, -0.3).normalize();
        let plane = Plane::through(&Point3::new(0.0, 0.5, 0.0), n).unwrap();
        let (u, v) = plane.basis();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts: Vec<Point3<f64>> = (0..200)
            .map(|_| plane.anchor() + u * rng.random_range(-1.0..1.0) + v * rng.random_range(-1.0..1.0))
            .collect();
        // subject on the *negative* side of the input normal
        for _ in 0..50 {
            pts.push(plane.anchor() - n * rng.random_range(0.2..1.5) + u * rng.random_range(-0.3..0.3));
        }
        let fit = fit_ground_plane(&pts, 0.005, 256, 1).unwrap();
        assert!(fit.plane.normal.dot(&n) < -0.999);
    }

    #[test]
    fn collinear_points_fail() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(2.0, 2.0, 2.0),
        ];
        assert!(matches!(fit_ground_plane(&pts, 0.01, 100, 0), Err(Error::Fit(_))));
        assert!(matches!(fit_ground_plane(&pts[..2], 0.01, 100, 0), Err(Error::Fit(_))));
    }

    fn ring(center: Point3<f64>, r: f64, n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / n as f64;
                center + Vector3::new(r * t.cos(), 0.0, r * t.sin())
            })
            .collect()
    }

    #[test]
    fn exact_stand_circle() {
        let ground = Plane::new(Vector3::y(), 0.0).unwrap();
        let pts = ring(Point3::new(1.0, 0.0, 2.0), 0.3, 64);
        let fit = fit_stand_circle(&pts, &ground, 0.01, 4).unwrap();
        assert!((fit.circle.center - Point3::new(1.0, 0.0, 2.0)).norm() < 1e-6);
        assert!((fit.circle.radius - 0.3).abs() < 1e-6);
        assert_eq!(fit.inliers, 64);
    }

    #[test]
    fn noisy_stand_circle_with_clutter() {
        let ground = Plane::new(Vector3::y(), 0.0).unwrap();
        let clean = ring(Point3::new(1.0, 0.0, 2.0), 0.3, 200);
        let (c_ref, r_ref) = {
            let flat: Vec<Point2<f64>> = clean.iter().map(|p| Point2::new(p.x, p.z)).collect();
            kasa_fit(&flat).unwrap()
        };
        assert!((r_ref - 0.3).abs() < 1e-9 && (c_ref - Point2::new(1.0, 2.0)).norm() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = Normal::new(0.0, 0.005).unwrap();
        let mut pts: Vec<Point3<f64>> = clean
            .iter()
            .map(|p| p + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
            .collect();
        // feet standing inside the rim and body points far above the band
        for _ in 0..40 {
            pts.push(Point3::new(
                1.0 + rng.random_range(-0.12..0.12),
                rng.random_range(0.0..0.01),
                2.0 + rng.random_range(-0.08..0.08),
            ));
            pts.push(Point3::new(1.0, rng.random_range(0.3..1.8), 2.0));
        }
        let fit = fit_stand_circle(&pts, &ground, 0.05, 2).unwrap();
        assert!((fit.circle.radius - r_ref).abs() < 0.01, "radius {}", fit.circle.radius);
        assert!((fit.circle.center - Point3::new(1.0, 0.0, 2.0)).norm() < 0.01);
        assert!(fit.circle.plane.signed_distance(&fit.circle.center).abs() < 1e-6);
    }

    #[test]
    fn too_few_ground_points_fail() {
        let ground = Plane::new(Vector3::y(), 0.0).unwrap();
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 5.0, 0.0)];
        assert!(matches!(fit_stand_circle(&pts, &ground, 0.01, 0), Err(Error::Fit(_))));
    }

    #[test]
    fn circumcircle_of_right_triangle() {
        let (c, r) = circumcircle(&Point2::new(0.0, 0.0), &Point2::new(2.0, 0.0), &Point2::new(0.0, 2.0)).unwrap();
        assert!((c - Point2::new(1.0, 1.0)).norm() < 1e-12);
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
        assert!(circumcircle(&Point2::new(0.0, 0.0), &Point2::new(1.0, 1.0), &Point2::new(2.0, 2.0)).is_none());
    }
}
