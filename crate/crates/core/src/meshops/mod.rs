//! Triangle meshes, point clouds, ground/stand fitting, canonical alignment
//! and sampled Hausdorff validation.

mod bvh;
mod canonical;
mod fit;
mod hausdorff;
mod kdtree;
pub mod obj;
pub mod ply;
pub mod primitives;

pub use bvh::{closest_point_on_triangle, ClosestHit, TriangleBvh};
pub use canonical::{canonicalize, canonicalize_with, CanonicalTransform, CanonicalizationSidecar};
pub use fit::{fit_ground_plane, fit_stand_circle, fit_stand_circle_with, CircleFit, FitSummary, PlaneFit};
pub use hausdorff::{hausdorff, hausdorff_symmetric, sample_surface, HausdorffReport, SurfaceSample};
pub use kdtree::VertexIndex;

use image::RgbImage;
use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

/// Number of RANSAC hypotheses used by the fitting routines unless overridden.
pub const DEFAULT_RANSAC_ITERATIONS: usize = 1024;

/// Indexed triangle mesh with optional per-corner UVs and a single texture.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[u32; 3]>,
    /// Per-corner texture coordinates, parallel to `faces`; empty when untextured.
    pub uvs: Vec<[[f64; 2]; 3]>,
    pub texture: Option<RgbImage>,
    /// Area-weighted averages of incident face normals.
    pub vertex_normals: Vec<Vector3<f64>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= n) {
                return Err(Error::Input(format!(
                    "face {i} references a vertex out of range (mesh has {n} vertices)"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Input(format!("face {i} repeats a vertex: {f:?}")));
            }
        }
        let mut mesh = Self {
            vertices,
            faces,
            uvs: Vec::new(),
            texture: None,
            vertex_normals: Vec::new(),
        };
        mesh.recompute_normals();
        Ok(mesh)
    }

    pub fn with_texture(mut self, uvs: Vec<[[f64; 2]; 3]>, texture: Option<RgbImage>) -> Result<Self> {
        if !uvs.is_empty() && uvs.len() != self.faces.len() {
            return Err(Error::Input(format!(
                "{} UV triples for {} faces",
                uvs.len(),
                self.faces.len()
            )));
        }
        self.uvs = uvs;
        self.texture = texture;
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, face: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unnormalized face normal; its length is twice the triangle area.
    pub fn face_cross(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_cross(face).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn recompute_normals(&mut self) {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for &[a, b, c] in &self.faces {
            let n = (self.vertices[b as usize] - self.vertices[a as usize])
                .cross(&(self.vertices[c as usize] - self.vertices[a as usize]));
            for v in [a, b, c] {
                acc[v as usize] += n;
            }
        }
        self.vertex_normals = acc
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vector3::y()
                }
            })
            .collect();
    }

    pub fn bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    /// Moves every vertex through `f`, keeping topology, UVs and texture.
    pub fn map_vertices(&self, f: impl Fn(&Point3<f64>) -> Point3<f64>) -> TriMesh {
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = f(v);
        }
        out.recompute_normals();
        out
    }

    /// Unique undirected edges `(lo, hi)` in ascending order.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut edges: Vec<(u32, u32)> = self
            .faces
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .map(|(u, v)| (u.min(v), u.max(v)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Nearest-texel lookup; `v = 0` is the bottom row of the texture.
    pub fn sample_texture(&self, uv: [f64; 2]) -> Option<[u8; 3]> {
        let tex = self.texture.as_ref()?;
        let (x, y) = texel_of(uv, tex.width(), tex.height());
        Some(tex.get_pixel(x, y).0)
    }

    /// Keeps the faces whose three vertices satisfy `keep` and drops any vertex
    /// left unreferenced. Returns the old-to-new vertex map.
    pub fn retain_vertices(&self, keep: impl Fn(&Point3<f64>) -> bool) -> (TriMesh, Vec<Option<u32>>) {
        let alive: Vec<bool> = self.vertices.iter().map(&keep).collect();
        let kept_faces: Vec<usize> = (0..self.faces.len())
            .filter(|&f| self.faces[f].iter().all(|&v| alive[v as usize]))
            .collect();
        let mut used = vec![false; self.vertices.len()];
        for &f in &kept_faces {
            for &v in &self.faces[f] {
                used[v as usize] = true;
            }
        }
        let mut remap = vec![None; self.vertices.len()];
        let mut vertices = Vec::new();
        for (i, p) in self.vertices.iter().enumerate() {
            if used[i] {
                remap[i] = Some(vertices.len() as u32);
                vertices.push(*p);
            }
        }
        let faces = kept_faces
            .iter()
            .map(|&f| self.faces[f].map(|v| remap[v as usize].expect("kept face vertex")))
            .collect();
        let uvs = if self.uvs.is_empty() {
            Vec::new()
        } else {
            kept_faces.iter().map(|&f| self.uvs[f]).collect()
        };
        let mut mesh = TriMesh {
            vertices,
            faces,
            uvs,
            texture: self.texture.clone(),
            vertex_normals: Vec::new(),
        };
        mesh.recompute_normals();
        (mesh, remap)
    }
}

/// Texel containing `uv` (nearest sampling, clamped to the texture).
pub fn texel_of(uv: [f64; 2], width: u32, height: u32) -> (u32, u32) {
    let x = (uv[0] * f64::from(width)).floor();
    let y = ((1.0 - uv[1]) * f64::from(height)).floor();
    (
        x.clamp(0.0, f64::from(width) - 1.0) as u32,
        y.clamp(0.0, f64::from(height) - 1.0) as u32,
    )
}

/// Plane `{x : normal · x = offset}` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::param("plane normal must be non-zero"));
        }
        Ok(Self {
            normal: normal / len,
            offset: offset / len,
        })
    }

    pub fn through(point: &Point3<f64>, normal: Vector3<f64>) -> Result<Self> {
        let n = normal.try_normalize(0.0).ok_or_else(|| Error::param("plane normal must be non-zero"))?;
        Ok(Self {
            normal: n,
            offset: n.dot(&point.coords),
        })
    }

    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.normal.dot(&p.coords) - self.offset
    }

    pub fn project(&self, p: &Point3<f64>) -> Point3<f64> {
        p - self.normal * self.signed_distance(p)
    }

    /// Point of the plane closest to the world origin.
    pub fn anchor(&self) -> Point3<f64> {
        Point3::from(self.normal * self.offset)
    }

    /// Orthonormal in-plane basis `(u, v)` with `u × v = normal`.
    pub fn basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.normal;
        let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
        let u = helper.cross(&n).normalize();
        let v = n.cross(&u);
        (u, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle3D {
    pub center: Point3<f64>,
    pub radius: f64,
    pub plane: Plane,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_faces() {
        let v = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 1]]).is_err());
        let m = TriMesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert_eq!(m.vertex_normals[0], Vector3::z());
        assert!((m.surface_area() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn vertex_normals_are_unit_and_area_weighted() {
        let m = primitives::icosphere(1.0, 2);
        for (p, n) in m.vertices.iter().zip(&m.vertex_normals) {
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!(n.dot(&p.coords.normalize()) > 0.99);
        }
    }

    #[test]
    fn texel_lookup_flips_v() {
        assert_eq!(texel_of([0.0, 1.0], 4, 4), (0, 0));
        assert_eq!(texel_of([0.0, 0.0], 4, 4), (0, 3));
        assert_eq!(texel_of([0.99, 0.01], 4, 4), (3, 3));
        assert_eq!(texel_of([1.5, -2.0], 4, 4), (3, 3));
    }

    #[test]
    fn retain_drops_dangling_faces_and_vertices() {
        let m = primitives::grid_square(1.0, 2, 0.0);
        let (cropped, remap) = m.retain_vertices(|p| p.x <= 0.5 + 1e-12);
        assert_eq!(cropped.faces.len(), m.faces.len() / 2);
        assert_eq!(cropped.vertices.len(), 6);
        assert_eq!(remap.iter().filter(|r| r.is_some()).count(), 6);
    }

    #[test]
    fn plane_basis_is_orthonormal() {
        let p = Plane::new(Vector3::new(0.3, -2.0, 0.5), 1.0).unwrap();
        let (u, v) = p.basis();
        assert!(u.dot(&v).abs() < 1e-15);
        assert!((u.cross(&v) - p.normal).norm() < 1e-12);
        let q = Point3::new(1.0, 2.0, 3.0);
        assert!(p.signed_distance(&p.project(&q)).abs() < 1e-12);
    }
}
