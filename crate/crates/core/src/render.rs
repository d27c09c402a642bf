//! Z-buffered software rasterizer producing color, depth and subject-mask
//! rasters for a camera.
//!
//! Depth is the camera-frame z of the nearest surface, interpolated
//! perspective-correctly (linear in 1/z across the screen). Back faces are
//! kept; only triangles behind the near plane are clipped away.

use image::{Rgb, RgbImage};
use nalgebra::{Point2, Point3, Vector3};

use crate::camgeom::CameraRecord;
use crate::meshops::{texel_of, TriMesh};

/// Near clipping distance in meters.
pub const NEAR_PLANE: f64 = 1e-4;

/// Color of pixels that see no surface.
pub const BACKGROUND_COLOR: [u8; 3] = [0, 0, 0];

/// Color of untextured surfaces.
pub const UNTEXTURED_COLOR: [u8; 3] = [200, 200, 200];

pub const NO_FACE: u32 = u32::MAX;

pub type ColorImage = RgbImage;

/// Per-pixel camera-frame depth in meters; `+inf` where no surface is seen.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl DepthImage {
    pub fn background(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![f32::INFINITY; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn is_background(&self, x: u32, y: u32) -> bool {
        !self.get(x, y).is_finite()
    }
}

/// Per-pixel flag: the pixel's 3-D point lies inside the capture region.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMask {
    pub width: u32,
    pub height: u32,
    pub values: Vec<bool>,
}

impl SubjectMask {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![true; width as usize * height as usize],
        }
    }
}

/// Vertical cylinder bounding the region attributed to the subject.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CaptureCylinder {
    pub center_xz: [f64; 2],
    pub radius: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for CaptureCylinder {
    fn default() -> Self {
        Self {
            center_xz: [0.0, 0.0],
            radius: 0.8,
            y_min: 0.0,
            y_max: 2.2,
        }
    }
}

impl CaptureCylinder {
    pub fn validate(&self) -> crate::Result<()> {
        if self.radius > 0.0 && self.y_max > self.y_min {
            Ok(())
        } else {
            Err(crate::Error::Parameter(format!("invalid capture cylinder {self:?}")))
        }
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let dx = p.x - self.center_xz[0];
        let dz = p.z - self.center_xz[1];
        dx * dx + dz * dz <= self.radius * self.radius && p.y >= self.y_min && p.y <= self.y_max
    }
}

/// Visible-surface buffer: nearest face per pixel with its perspective-correct
/// barycentric coordinates.
#[derive(Debug, Clone)]
pub struct Fragments {
    pub width: u32,
    pub height: u32,
    pub depth: DepthImage,
    pub face: Vec<u32>,
    /// Barycentric weights of the face's second and third corners.
    pub bary: Vec<[f32; 2]>,
}

impl Fragments {
    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn face_at(&self, x: u32, y: u32) -> Option<u32> {
        let f = self.face[self.index(x, y)];
        (f != NO_FACE).then_some(f)
    }

    /// Interpolated texture coordinate of the visible surface.
    pub fn uv_at(&self, mesh: &TriMesh, x: u32, y: u32) -> Option<[f64; 2]> {
        let i = self.index(x, y);
        let f = self.face[i];
        if f == NO_FACE || mesh.uvs.is_empty() {
            return None;
        }
        let [b1, b2] = self.bary[i].map(f64::from);
        let b0 = 1.0 - b1 - b2;
        let t = &mesh.uvs[f as usize];
        Some([
            b0 * t[0][0] + b1 * t[1][0] + b2 * t[2][0],
            b0 * t[0][1] + b1 * t[1][1] + b2 * t[2][1],
        ])
    }
}

#[derive(Clone, Copy)]
struct ClipVertex {
    pos: Vector3<f64>,
    /// Barycentric coordinates w.r.t. the original triangle.
    bary: [f64; 3],
}

fn lerp_clip(a: &ClipVertex, b: &ClipVertex, t: f64) -> ClipVertex {
    ClipVertex {
        pos: a.pos + (b.pos - a.pos) * t,
        bary: [
            a.bary[0] + (b.bary[0] - a.bary[0]) * t,
            a.bary[1] + (b.bary[1] - a.bary[1]) * t,
            a.bary[2] + (b.bary[2] - a.bary[2]) * t,
        ],
    }
}

/// Sutherland–Hodgman against `z >= NEAR_PLANE`.
fn clip_near(tri: [ClipVertex; 3]) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let cur = &tri[i];
        let next = &tri[(i + 1) % 3];
        let cur_in = cur.pos.z >= NEAR_PLANE;
        let next_in = next.pos.z >= NEAR_PLANE;
        if cur_in {
            out.push(*cur);
        }
        if cur_in != next_in {
            let t = (NEAR_PLANE - cur.pos.z) / (next.pos.z - cur.pos.z);
            out.push(lerp_clip(cur, next, t));
        }
    }
    out
}

/// Rasterizes visible surfaces of `mesh` as seen by `cam`.
pub fn rasterize_fragments(mesh: &TriMesh, cam: &CameraRecord) -> Fragments {
    let k = cam.intrinsics;
    let (w, h) = (k.width, k.height);
    let n = w as usize * h as usize;
    let mut depth = vec![f64::INFINITY; n];
    let mut face_buf = vec![NO_FACE; n];
    let mut bary_buf = vec![[0f32; 2]; n];

    let cam_vertices: Vec<Vector3<f64>> = mesh.vertices.iter().map(|p| cam.to_camera(p)).collect();
    let project = |v: &Vector3<f64>| Point2::new(k.fx * v.x / v.z + k.cx, k.fy * v.y / v.z + k.cy);

    for (fi, f) in mesh.faces.iter().enumerate() {
        let corners = f.map(|v| cam_vertices[v as usize]);
        if corners.iter().all(|c| c.z < NEAR_PLANE) {
            continue;
        }
        let tri = [
            ClipVertex {
                pos: corners[0],
                bary: [1.0, 0.0, 0.0],
            },
            ClipVertex {
                pos: corners[1],
                bary: [0.0, 1.0, 0.0],
            },
            ClipVertex {
                pos: corners[2],
                bary: [0.0, 0.0, 1.0],
            },
        ];
        let poly = if corners.iter().all(|c| c.z >= NEAR_PLANE) {
            tri.to_vec()
        } else {
            clip_near(tri)
        };
        for j in 1..poly.len().saturating_sub(1) {
            let sub = [poly[0], poly[j], poly[j + 1]];
            let screen = sub.map(|v| project(&v.pos));
            let inv_z = sub.map(|v| 1.0 / v.pos.z);
            let area = (screen[1] - screen[0]).perp(&(screen[2] - screen[0]));
            if !(area.abs() > 1e-18) || !area.is_finite() {
                continue;
            }
            let min_x = screen.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).ceil().max(0.0);
            let max_x = screen
                .iter()
                .map(|p| p.x)
                .fold(f64::NEG_INFINITY, f64::max)
                .floor()
                .min(f64::from(w) - 1.0);
            let min_y = screen.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).ceil().max(0.0);
            let max_y = screen
                .iter()
                .map(|p| p.y)
                .fold(f64::NEG_INFINITY, f64::max)
                .floor()
                .min(f64::from(h) - 1.0);
            if min_x > max_x || min_y > max_y {
                continue;
            }
            let inv_area = 1.0 / area;
            for py in min_y as u32..=max_y as u32 {
                let y = f64::from(py);
                for px in min_x as u32..=max_x as u32 {
                    let p = Point2::new(f64::from(px), y);
                    let l0 = (screen[2] - screen[1]).perp(&(p - screen[1])) * inv_area;
                    let l1 = (screen[0] - screen[2]).perp(&(p - screen[2])) * inv_area;
                    let l2 = (screen[1] - screen[0]).perp(&(p - screen[0])) * inv_area;
                    if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                        continue;
                    }
                    let iz = l0 * inv_z[0] + l1 * inv_z[1] + l2 * inv_z[2];
                    let z = 1.0 / iz;
                    let idx = py as usize * w as usize + px as usize;
                    if z < depth[idx] {
                        depth[idx] = z;
                        face_buf[idx] = fi as u32;
                        // perspective-correct weights of the clipped corners
                        let b = [l0 * inv_z[0] * z, l1 * inv_z[1] * z, l2 * inv_z[2] * z];
                        let mut orig = [0.0; 3];
                        for (c, wgt) in sub.iter().zip(b) {
                            for (o, cb) in orig.iter_mut().zip(c.bary) {
                                *o += cb * wgt;
                            }
                        }
                        bary_buf[idx] = [orig[1] as f32, orig[2] as f32];
                    }
                }
            }
        }
    }

    Fragments {
        width: w,
        height: h,
        depth: DepthImage {
            width: w,
            height: h,
            values: depth.into_iter().map(|d| d as f32).collect(),
        },
        face: face_buf,
        bary: bary_buf,
    }
}

/// Flat ambient shading: the nearest texel of the mesh texture, or a neutral
/// grey when the mesh is untextured.
pub fn shade(fragments: &Fragments, mesh: &TriMesh) -> ColorImage {
    let textured = mesh.texture.is_some() && !mesh.uvs.is_empty();
    RgbImage::from_fn(fragments.width, fragments.height, |x, y| {
        if fragments.face_at(x, y).is_none() {
            return Rgb(BACKGROUND_COLOR);
        }
        if !textured {
            return Rgb(UNTEXTURED_COLOR);
        }
        let uv = fragments.uv_at(mesh, x, y).expect("textured fragment");
        Rgb(mesh.sample_texture(uv).expect("texture present"))
    })
}

/// Color and depth of `mesh` from `cam`.
pub fn rasterize(mesh: &TriMesh, cam: &CameraRecord) -> (ColorImage, DepthImage) {
    let frags = rasterize_fragments(mesh, cam);
    let color = shade(&frags, mesh);
    (color, frags.depth)
}

/// Samples a per-texel label raster (same layout as the mesh texture) at every
/// visible fragment. Background and unlabeled pixels get `None`.
pub fn sample_labels(
    fragments: &Fragments,
    mesh: &TriMesh,
    labels: &[u32],
    label_width: u32,
    label_height: u32,
    unlabeled: u32,
) -> Vec<Option<u32>> {
    let mut out = vec![None; fragments.width as usize * fragments.height as usize];
    for y in 0..fragments.height {
        for x in 0..fragments.width {
            if let Some(uv) = fragments.uv_at(mesh, x, y) {
                let (tx, ty) = texel_of(uv, label_width, label_height);
                let l = labels[ty as usize * label_width as usize + tx as usize];
                if l != unlabeled {
                    out[y as usize * fragments.width as usize + x as usize] = Some(l);
                }
            }
        }
    }
    out
}

/// Marks pixels whose unprojected 3-D point lies inside the capture cylinder.
pub fn subject_mask(depth: &DepthImage, cam: &CameraRecord, cyl: &CaptureCylinder) -> SubjectMask {
    let mut values = vec![false; depth.values.len()];
    for y in 0..depth.height {
        for x in 0..depth.width {
            let d = depth.get(x, y);
            if !d.is_finite() {
                continue;
            }
            let p = cam.to_world(&cam.unproject_camera(&Point2::new(f64::from(x), f64::from(y)), f64::from(d)));
            values[y as usize * depth.width as usize + x as usize] = cyl.contains(&p);
        }
    }
    SubjectMask {
        width: depth.width,
        height: depth.height,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camgeom::Intrinsics;
    use crate::meshops::primitives;
    use nalgebra::Matrix3;

    fn camera(w: u32, h: u32, f: f64) -> CameraRecord {
        let k = Intrinsics::new(f, f, (f64::from(w) - 1.0) / 2.0, (f64::from(h) - 1.0) / 2.0, w, h).unwrap();
        CameraRecord::new("T", k, Matrix3::identity(), Point3::origin(), "").unwrap()
    }

    #[test]
    fn mesh_behind_camera_renders_background() {
        let mesh = primitives::icosphere(0.5, 1).map_vertices(|p| p + Vector3::new(0.0, 0.0, -3.0));
        let (color, depth) = rasterize(&mesh, &camera(32, 24, 30.0));
        assert!(depth.values.iter().all(|d| d.is_infinite()));
        assert!(color.pixels().all(|p| p.0 == BACKGROUND_COLOR));
    }

    #[test]
    fn fronto_parallel_triangle_has_constant_depth() {
        let mesh = TriMesh::new(
            vec![
                Point3::new(-10.0, -10.0, 2.0),
                Point3::new(10.0, -10.0, 2.0),
                Point3::new(0.0, 10.0, 2.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let (_, depth) = rasterize(&mesh, &camera(40, 30, 35.0));
        let covered: Vec<f32> = depth.values.iter().copied().filter(|d| d.is_finite()).collect();
        assert!(!covered.is_empty());
        assert!(covered.iter().all(|d| (d - 2.0).abs() <= 1e-5));
    }

    #[test]
    fn sphere_depth_on_axis() {
        // ray–sphere oracle: the on-axis hit of a unit sphere 3 m ahead is at z = 2
        let mesh = primitives::icosphere(1.0, 5).map_vertices(|p| p + Vector3::new(0.0, 0.0, 3.0));
        let cam = camera(65, 65, 60.0);
        let (_, depth) = rasterize(&mesh, &cam);
        let d = depth.get(32, 32);
        assert!((d - 2.0).abs() < 1e-3, "depth {d}");
    }

    #[test]
    fn winding_does_not_matter() {
        let verts = vec![
            Point3::new(-1.0, -1.0, 2.0),
            Point3::new(1.0, -1.0, 2.0),
            Point3::new(0.0, 1.0, 2.0),
        ];
        let a = TriMesh::new(verts.clone(), vec![[0, 1, 2]]).unwrap();
        let b = TriMesh::new(verts, vec![[0, 2, 1]]).unwrap();
        let cam = camera(20, 20, 15.0);
        assert_eq!(rasterize(&a, &cam).1, rasterize(&b, &cam).1);
    }

    #[test]
    fn near_plane_clipping_keeps_visible_part() {
        // a floor strip running from behind the camera to far ahead
        let mesh = TriMesh::new(
            vec![
                Point3::new(-1.0, 0.5, -1.0),
                Point3::new(1.0, 0.5, -1.0),
                Point3::new(1.0, 0.5, 5.0),
                Point3::new(-1.0, 0.5, 5.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let cam = camera(40, 40, 20.0);
        let frags = rasterize_fragments(&mesh, &cam);
        let mut covered = 0;
        for y in 0..40 {
            for x in 0..40 {
                let d = frags.depth.get(x, y);
                if d.is_finite() {
                    covered += 1;
                    // plane y = 0.5 seen through this pixel: z = 0.5 * f / (py - cy)
                    let expected = 0.5 * 20.0 / (f64::from(y) - 19.5);
                    assert!((f64::from(d) - expected).abs() < 1e-4 * expected.max(1.0));
                }
            }
        }
        assert!(covered > 100);
    }

    #[test]
    fn perspective_correct_uvs() {
        let mut mesh = primitives::grid_square(2.0, 1, 0.0)
            .map_vertices(|p| Point3::new(p.x - 1.0, p.y - 1.0, 1.5 + 0.6 * p.x));
        mesh.texture = Some(RgbImage::from_fn(64, 64, |x, _| Rgb([(x * 4) as u8, 0, 0])));
        let cam = camera(50, 50, 40.0);
        let frags = rasterize_fragments(&mesh, &cam);
        for (x, y) in [(10, 25), (25, 25), (35, 30)] {
            let d = f64::from(frags.depth.get(x, y));
            let p = cam.unproject(&Point2::new(f64::from(x), f64::from(y)), d).unwrap();
            let uv = frags.uv_at(&mesh, x, y).unwrap();
            // planar map: u = (x + 1) / 2
            assert!((uv[0] - (p.x + 1.0) / 2.0).abs() < 1e-5, "uv {uv:?} at {p:?}");
        }
    }

    #[test]
    fn mask_follows_cylinder() {
        let cam = camera(3, 1, 1.0);
        let cyl = CaptureCylinder {
            center_xz: [0.0, 2.0],
            radius: 0.5,
            y_min: -1.0,
            y_max: 1.0,
        };
        let all_bg = DepthImage::background(3, 1);
        assert_eq!(subject_mask(&all_bg, &cam, &cyl).count(), 0);
        let depth = DepthImage {
            width: 3,
            height: 1,
            values: vec![2.0, 2.0, f32::INFINITY],
        };
        let m = subject_mask(&depth, &cam, &cyl);
        // pixel 1 is on the axis; pixel 0 unprojects to x = -2 (outside)
        assert_eq!(m.values, vec![false, true, false]);
        assert!(cyl.contains(&Point3::new(0.0, 0.0, 2.0)));
        assert!(!cyl.contains(&Point3::new(0.5 + 1e-3, 0.0, 2.0)));
        assert!(cyl.contains(&Point3::new(0.5 - 1e-3, 0.0, 2.0)));
    }
}
