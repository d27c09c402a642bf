//! Sampled (one-sided and symmetric) Hausdorff distance between meshes.

use std::collections::HashSet;

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{TriMesh, TriangleBvh};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub face: usize,
    pub point: Point3<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HausdorffReport {
    pub max: f64,
    pub mean: f64,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_sample: Vec<f64>,
}

/// Area-uniform random points on the mesh surface.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Vec<SurfaceSample> {
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r: f64 = rng.random::<f64>() * total;
            let face = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
            let (s, t): (f64, f64) = (rng.random(), rng.random());
            let su = s.sqrt();
            let (u, v) = (1.0 - su, su * t);
            let [a, b, c] = mesh.triangle(face);
            let point = Point3::from(a.coords * u + b.coords * v + c.coords * (1.0 - u - v));
            SurfaceSample { face, point }
        })
        .collect()
}

fn triangle_key(t: &[Point3<f64>; 3]) -> [[u64; 3]; 3] {
    let mut key = t.map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]);
    key.sort_unstable();
    key
}

/// One-sided sampled Hausdorff distance from `a` to `b`: `n_samples` area-uniform
/// points on `a`, each measured by its exact distance to the triangles of `b`.
pub fn hausdorff(a: &TriMesh, b: &TriMesh, n_samples: usize, seed: u64) -> Result<HausdorffReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::param("hausdorff needs two non-empty meshes"));
    }
    if n_samples == 0 {
        return Err(Error::param("hausdorff needs at least one sample"));
    }
    let samples = sample_surface(a, n_samples, seed);
    if samples.is_empty() {
        return Err(Error::param("source mesh has zero surface area"));
    }
    let bvh = TriangleBvh::new(b);
    // A sample drawn on a triangle that `b` also contains lies on `b`.
    let shared: HashSet<[[u64; 3]; 3]> = (0..b.faces.len()).map(|f| triangle_key(&b.triangle(f))).collect();
    let per_sample: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            if shared.contains(&triangle_key(&a.triangle(s.face))) {
                0.0
            } else {
                bvh.closest_point(&s.point).map_or(f64::INFINITY, |h| h.distance)
            }
        })
        .collect();
    let max = per_sample.iter().copied().fold(0.0, f64::max);
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(HausdorffReport {
        max,
        mean,
        n_samples: per_sample.len(),
        seed,
        per_sample,
    })
}

/// `max` of both one-sided maxima; `mean` averages both directions.
pub fn hausdorff_symmetric(a: &TriMesh, b: &TriMesh, n_samples: usize, seed: u64) -> Result<HausdorffReport> {
    let ab = hausdorff(a, b, n_samples, seed)?;
    let ba = hausdorff(b, a, n_samples, seed.wrapping_add(1))?;
    let mut per_sample = ab.per_sample;
    per_sample.extend(ba.per_sample);
    Ok(HausdorffReport {
        max: ab.max.max(ba.max),
        mean: (ab.mean + ba.mean) / 2.0,
        n_samples: per_sample.len(),
        seed,
        per_sample,
    })
}
