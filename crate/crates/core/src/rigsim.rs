//! Virtual reproduction of the cylindrical camera rig and synthesis of
//! complete capture sessions with ground truth from a textured mesh.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camgeom::{self, CameraRecord, Intrinsics};
use crate::detect::{BBox, Detection2D, DetectionSet, DetectionSource};
use crate::error::{Error, Result};
use crate::fuse3d::MemberRef;
use crate::io;
use crate::meshops::{self, primitives, TriMesh, TriangleBvh};
use crate::render::{self, CaptureCylinder};
use crate::session::SessionLayout;
use crate::track::CorrespondenceMap;

/// Depth agreement required to call a lesion center unoccluded.
pub const OCCLUSION_TOLERANCE_M: f64 = 0.005;

const NO_LABEL: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub n_poles: u32,
    pub heights_m: Vec<f64>,
    pub radius_m: f64,
    /// Full-resolution image size.
    pub width: u32,
    pub height: u32,
    pub focal_mm: f64,
    pub sensor_width_mm: f64,
    /// Aim height per ring; `None` aims each ring at its own mounting height.
    pub look_at_height_m: Option<Vec<f64>>,
    /// Resolution factor applied to the image size (0.25 for desk-scale runs).
    pub image_scale: f64,
    /// Minimum ground-truth box side at full resolution.
    pub visibility_floor_px: f64,
    pub capture: CaptureCylinder,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            n_poles: 15,
            heights_m: vec![0.3, 0.8, 1.3, 1.8],
            radius_m: 1.1,
            width: 4000,
            height: 6000,
            focal_mm: 18.0,
            sensor_width_mm: camgeom::DEFAULT_SENSOR_WIDTH_MM,
            look_at_height_m: None,
            image_scale: 1.0,
            visibility_floor_px: 5.0,
            capture: CaptureCylinder::default(),
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_poles < 3 || self.n_poles > 26 {
            return Err(Error::param(format!("rig needs 3..=26 poles, got {}", self.n_poles)));
        }
        if !(self.radius_m > 0.0) {
            return Err(Error::param(format!("rig radius must be positive, got {}", self.radius_m)));
        }
        if self.heights_m.is_empty() || self.heights_m.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("camera heights must be non-empty and strictly increasing"));
        }
        if let Some(aims) = &self.look_at_height_m {
            if aims.len() != self.heights_m.len() {
                return Err(Error::param("one look-at height per camera height is required"));
            }
        }
        if !(self.image_scale > 0.0) {
            return Err(Error::param("image scale must be positive"));
        }
        let (w, h) = self.image_size();
        if w == 0 || h == 0 {
            return Err(Error::param("scaled image size is empty"));
        }
        self.capture.validate()?;
        self.intrinsics().map(|_| ())
    }

    /// Image size after applying `image_scale`.
    pub fn image_size(&self) -> (u32, u32) {
        (
            (f64::from(self.width) * self.image_scale).round() as u32,
            (f64::from(self.height) * self.image_scale).round() as u32,
        )
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        let (w, h) = self.image_size();
        Intrinsics::from_rig(self.focal_mm, self.sensor_width_mm, w, h)
    }

    pub fn visibility_floor(&self) -> f64 {
        self.visibility_floor_px * self.image_scale
    }

    pub fn pole_azimuth_deg(&self, pole: u32) -> f64 {
        360.0 * f64::from(pole) / f64::from(self.n_poles)
    }
}

pub fn pole_letter(pole: u32) -> char {
    char::from(b'A' + pole as u8)
}

pub fn camera_id(pole: u32, height_index: usize) -> String {
    format!("{}{}", pole_letter(pole), height_index + 1)
}

/// Splits an id such as `"C3"` into pole letter and 1-based height index.
pub fn parse_camera_id(id: &str) -> Option<(char, u32)> {
    let mut chars = id.chars();
    let pole = chars.next().filter(char::is_ascii_uppercase)?;
    let idx: u32 = chars.as_str().parse().ok()?;
    (idx >= 1).then_some((pole, idx))
}

/// Cameras ordered pole by pole, bottom ring first. Pole `k` sits at azimuth
/// `360·k/n` degrees measured from +z towards +x; pole A faces the subject's front.
pub fn generate_rig(cfg: &RigConfig) -> Result<Vec<CameraRecord>> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    let mut cams = Vec::with_capacity(cfg.n_poles as usize * cfg.heights_m.len());
    for pole in 0..cfg.n_poles {
        let theta = cfg.pole_azimuth_deg(pole).to_radians();
        for (hi, &h) in cfg.heights_m.iter().enumerate() {
            let aim = cfg.look_at_height_m.as_ref().map_or(h, |a| a[hi]);
            let eye = Point3::new(cfg.radius_m * theta.sin(), h, cfg.radius_m * theta.cos());
            let target = Point3::new(0.0, aim, 0.0);
            let id = camera_id(pole, hi);
            let image = SessionLayout::image_rel(&id);
            cams.push(CameraRecord::look_at(id, k, eye, target, Vector3::y(), image)?);
        }
    }
    Ok(cams)
}

// ---------------------------------------------------------------- phantom

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub radius_m: f64,
    pub height_m: f64,
    pub rings: u32,
    pub segments: u32,
    pub texture_size: u32,
    pub skin_color: [u8; 3],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            radius_m: 0.155,
            height_m: 1.7,
            rings: 360,
            segments: 192,
            texture_size: 2048,
            skin_color: [224, 172, 150],
        }
    }
}

/// Capsule standing on the ground at the origin with a uniform skin texture.
pub fn phantom_mesh(cfg: &PhantomConfig) -> TriMesh {
    let mut mesh = primitives::capsule(cfg.radius_m, cfg.height_m, 0.0, cfg.rings, cfg.segments);
    mesh.texture = Some(RgbImage::from_pixel(cfg.texture_size, cfg.texture_size, Rgb(cfg.skin_color)));
    mesh
}

/// A point on a mesh face in barycentric form; it stays attached to the same
/// material point when the mesh deforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceAnchor {
    pub face: u32,
    pub bary: [f64; 3],
}

impl SurfaceAnchor {
    pub fn point(&self, mesh: &TriMesh) -> Point3<f64> {
        let [a, b, c] = mesh.triangle(self.face as usize);
        Point3::from(a.coords * self.bary[0] + b.coords * self.bary[1] + c.coords * self.bary[2])
    }

    pub fn normal(&self, mesh: &TriMesh) -> Vector3<f64> {
        mesh.face_cross(self.face as usize).normalize()
    }
}

fn barycentric(p: &Point3<f64>, tri: &[Point3<f64>; 3]) -> [f64; 3] {
    let (v0, v1, v2) = (tri[1] - tri[0], tri[2] - tri[0], p - tri[0]);
    let (d00, d01, d11) = (v0.dot(&v0), v0.dot(&v1), v1.dot(&v1));
    let (d20, d21) = (v2.dot(&v0), v2.dot(&v1));
    let denom = d00 * d11 - d01 * d01;
    let v = (d11 * d20 - d01 * d21) / denom;
    let w = (d00 * d21 - d01 * d20) / denom;
    [1.0 - v - w, v, w]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLesionSpec {
    pub id: u32,
    pub surface_point: Point3<f64>,
    pub diameter_mm: f64,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionPlacement {
    pub diameter_mm: (f64, f64),
    pub y_range_m: (f64, f64),
    /// Minimum Euclidean distance between lesion centers.
    pub min_separation_m: f64,
    /// Candidate points whose normal has a larger |y| component are skipped.
    pub max_normal_y: f64,
}

impl Default for LesionPlacement {
    fn default() -> Self {
        Self {
            diameter_mm: (6.0, 12.0),
            y_range_m: (0.25, 1.55),
            min_separation_m: 0.08,
            max_normal_y: 0.3,
        }
    }
}

/// Random lesions on the mesh surface, area-uniform subject to the placement
/// constraints. Ids run from 0 in placement order.
pub fn random_lesions(
    mesh: &TriMesh,
    count: usize,
    placement: &LesionPlacement,
    seed: u64,
) -> Result<Vec<(SurfaceAnchor, SyntheticLesionSpec)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = meshops::sample_surface(mesh, 200 * count.max(1), rng.random());
    let mut out: Vec<(SurfaceAnchor, SyntheticLesionSpec)> = Vec::new();
    for c in candidates {
        if out.len() == count {
            break;
        }
        let p = c.point;
        if p.y < placement.y_range_m.0 || p.y > placement.y_range_m.1 {
            continue;
        }
        let n = mesh.face_cross(c.face).normalize();
        if n.y.abs() > placement.max_normal_y {
            continue;
        }
        if out.iter().any(|(_, l)| (l.surface_point - p).norm() < placement.min_separation_m) {
            continue;
        }
        let (lo, hi) = placement.diameter_mm;
        let diameter = lo + (hi - lo) * rng.random::<f64>();
        let shade: f64 = rng.random_range(0.0..1.0);
        let color = [
            (45.0 + 40.0 * shade) as u8,
            (25.0 + 25.0 * shade) as u8,
            (18.0 + 20.0 * shade) as u8,
        ];
        let anchor = SurfaceAnchor {
            face: c.face as u32,
            bary: barycentric(&p, &mesh.triangle(c.face)),
        };
        out.push((
            anchor,
            SyntheticLesionSpec {
                id: out.len() as u32,
                surface_point: p,
                diameter_mm: diameter,
                color,
            },
        ));
    }
    if out.len() < count {
        return Err(Error::param(format!(
            "could only place {} of {count} lesions under the placement constraints",
            out.len()
        )));
    }
    Ok(out)
}

/// Per-texel lesion ids, same layout as the mesh texture.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
}

impl LabelRaster {
    pub fn count(&self, id: u32) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }
}

/// Paints each lesion as a filled disk into a copy of the mesh texture. A
/// texel belongs to a lesion when its surface point lies within the lesion
/// radius of the lesion center and on a face oriented like the lesion's face
/// (at lesion scale the Euclidean ball approximates the geodesic disk).
pub fn paint_lesions(mesh: &TriMesh, lesions: &[SyntheticLesionSpec]) -> Result<(TriMesh, LabelRaster)> {
    let tex = mesh
        .texture
        .as_ref()
        .ok_or_else(|| Error::param("lesion painting needs a textured mesh"))?;
    if mesh.uvs.is_empty() {
        return Err(Error::param("lesion painting needs texture coordinates"));
    }
    let (tw, th) = (tex.width(), tex.height());
    let mut texture = tex.clone();
    let mut labels = vec![NO_LABEL; tw as usize * th as usize];
    let bvh = TriangleBvh::new(mesh);
    let face_info: Vec<(Point3<f64>, f64, Vector3<f64>)> = (0..mesh.faces.len())
        .map(|f| {
            let t = mesh.triangle(f);
            let c = Point3::from((t[0].coords + t[1].coords + t[2].coords) / 3.0);
            let r = t.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
            let n = mesh.face_cross(f);
            let n = if n.norm() > 0.0 { n.normalize() } else { n };
            (c, r, n)
        })
        .collect();
    for lesion in lesions {
        if !(lesion.diameter_mm > 0.0) {
            return Err(Error::param(format!("lesion {} has non-positive diameter", lesion.id)));
        }
        let hit = bvh
            .closest_point(&lesion.surface_point)
            .ok_or_else(|| Error::param("cannot paint on an empty mesh"))?;
        if hit.distance > 1e-3 {
            return Err(Error::param(format!(
                "lesion {} lies {:.4} m off the mesh surface",
                lesion.id, hit.distance
            )));
        }
        let n_l = face_info[hit.face].2;
        let radius = lesion.diameter_mm / 2000.0;
        for (f, (c, fr, n)) in face_info.iter().enumerate() {
            if (c - lesion.surface_point).norm() > radius + fr || n.dot(&n_l) < 0.5 {
                continue;
            }
            let tri = mesh.triangle(f);
            let uv = mesh.uvs[f].map(|t| (t[0] * f64::from(tw), (1.0 - t[1]) * f64::from(th)));
            let area = (uv[1].0 - uv[0].0) * (uv[2].1 - uv[0].1) - (uv[2].0 - uv[0].0) * (uv[1].1 - uv[0].1);
            if area.abs() < 1e-12 {
                continue;
            }
            let min_x = uv.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
            let max_x = (uv.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil() as u32).min(tw - 1);
            let min_y = uv.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
            let max_y = (uv.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil() as u32).min(th - 1);
            for ty in min_y..=max_y {
                for tx in min_x..=max_x {
                    let (px, py) = (f64::from(tx) + 0.5, f64::from(ty) + 0.5);
                    let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                    let l0 = edge(uv[1], uv[2]) / area;
                    let l1 = edge(uv[2], uv[0]) / area;
                    let l2 = edge(uv[0], uv[1]) / area;
                    if l0 < -1e-9 || l1 < -1e-9 || l2 < -1e-9 {
                        continue;
                    }
                    let p = Point3::from(tri[0].coords * l0 + tri[1].coords * l1 + tri[2].coords * l2);
                    if (p - lesion.surface_point).norm() <= radius {
                        texture.put_pixel(tx, ty, Rgb(lesion.color));
                        labels[ty as usize * tw as usize + tx as usize] = lesion.id;
                    }
                }
            }
        }
    }
    let mut painted = mesh.clone();
    painted.texture = Some(texture);
    Ok((
        painted,
        LabelRaster {
            width: tw,
            height: th,
            labels,
        },
    ))
}

// ---------------------------------------------------------------- deformation

/// Smooth non-rigid pose change: everything above a transition band is
/// twisted about the vertical axis and then bent forward about a horizontal
/// axis through `(0, pivot_y, 0)`; the band blends both with a smoothstep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BendParams {
    pub pivot_y: f64,
    pub band_m: f64,
    pub bend_deg: f64,
    pub twist_deg: f64,
}

impl Default for BendParams {
    fn default() -> Self {
        Self {
            pivot_y: 0.95,
            band_m: 0.1,
            bend_deg: 15.0,
            twist_deg: 20.0,
        }
    }
}

impl BendParams {
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        let s = ((p.y - (self.pivot_y - self.band_m)) / (2.0 * self.band_m)).clamp(0.0, 1.0);
        let t = s * s * (3.0 - 2.0 * s);
        let twist = Rotation3::from_axis_angle(&Vector3::y_axis(), (self.twist_deg * t).to_radians());
        let bend = Rotation3::from_axis_angle(&Vector3::x_axis(), (self.bend_deg * t).to_radians());
        let pivot = Vector3::new(0.0, self.pivot_y, 0.0);
        let q = twist * p.coords;
        Point3::from(bend * (q - pivot) + pivot)
    }
}

/// Deformed copy with identical topology, so the identity map is the exact
/// vertex correspondence between the two poses.
pub fn bend(mesh: &TriMesh, params: &BendParams) -> TriMesh {
    mesh.map_vertices(|p| params.apply(p))
}

/// Degrades a vertex correspondence: each target vertex is displaced by
/// isotropic Gaussian noise of `sigma_m` per axis and re-snapped to the
/// nearest vertex of `mesh_b`.
pub fn noisy_correspondence(exact: &CorrespondenceMap, mesh_b: &TriMesh, sigma_m: f64, seed: u64) -> Result<CorrespondenceMap> {
    exact.validate(exact.pairs.len(), mesh_b.vertices.len())?;
    let normal = Normal::new(0.0, sigma_m).map_err(|e| Error::param(format!("invalid noise level: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = meshops::VertexIndex::new(&mesh_b.vertices);
    let pairs = exact
        .pairs
        .iter()
        .map(|&b| {
            let offset = Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
            index.nearest(&(mesh_b.vertices[b as usize] + offset)).map_or(b, |(v, _)| v)
        })
        .collect();
    Ok(CorrespondenceMap {
        mesh_a_id: exact.mesh_a_id.clone(),
        mesh_b_id: exact.mesh_b_id.clone(),
        pairs,
    })
}

// ---------------------------------------------------------------- sessions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLesion {
    pub id: u32,
    pub surface_point: Point3<f64>,
    pub normal: Vector3<f64>,
    pub diameter_mm: f64,
    pub color: [u8; 3],
    pub nearest_vertex: u32,
    /// Ground-truth boxes of this lesion.
    pub visible_in: Vec<MemberRef>,
}

/// Contents of `gt/lesions3d.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub seed: u64,
    pub rig: RigConfig,
    pub lesions: Vec<GroundTruthLesion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisReport {
    pub cameras: Vec<CameraRecord>,
    pub ground_truth: GroundTruthFile,
    pub gt_detections: DetectionSet,
}

/// Ground-truth boxes of one rendered view: tight boxes around each lesion's
/// visible pixels, kept when the lesion center is unoccluded and the box
/// meets the visibility floor.
fn view_ground_truth(
    cam: &CameraRecord,
    frags: &render::Fragments,
    pixel_labels: &[Option<u32>],
    lesions: &[SyntheticLesionSpec],
    floor_px: f64,
) -> Vec<Detection2D> {
    let w = frags.width as usize;
    let mut boxes: BTreeMap<u32, (u32, u32, u32, u32)> = BTreeMap::new();
    for (i, l) in pixel_labels.iter().enumerate() {
        if let Some(id) = l {
            let (x, y) = ((i % w) as u32, (i / w) as u32);
            boxes
                .entry(*id)
                .and_modify(|b| *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y)))
                .or_insert((x, y, x, y));
        }
    }
    let by_id: BTreeMap<u32, &SyntheticLesionSpec> = lesions.iter().map(|l| (l.id, l)).collect();
    let mut out = Vec::new();
    for (id, (x0, y0, x1, y1)) in boxes {
        let Some(spec) = by_id.get(&id) else { continue };
        let Ok((px, z)) = cam.project(&spec.surface_point) else { continue };
        if !cam.intrinsics.contains(&px) {
            continue;
        }
        let d = f64::from(frags.depth.get(px.x.round() as u32, px.y.round() as u32));
        if !(d.is_finite() && (d - z).abs() <= OCCLUSION_TOLERANCE_M) {
            continue;
        }
        let bbox = BBox::new(f64::from(x0), f64::from(y0), f64::from(x1 - x0 + 1), f64::from(y1 - y0 + 1));
        if bbox.w < floor_px || bbox.h < floor_px {
            continue;
        }
        let mut det = Detection2D::new(cam.id.clone(), out.len() as u32, bbox, 1.0, DetectionSource::GroundTruth);
        det.lesion_id = Some(id);
        out.push(det);
    }
    out
}

/// Paints the lesions, renders every rig view and writes a complete session
/// directory (images, depth, masks, cameras, mesh and ground truth).
pub fn synthesize_session(
    mesh: &TriMesh,
    cfg: &RigConfig,
    lesions: &[SyntheticLesionSpec],
    seed: u64,
    dir: &Path,
) -> Result<SynthesisReport> {
    if mesh.is_empty() {
        return Err(Error::param("cannot synthesize a session from an empty mesh"));
    }
    let cams = generate_rig(cfg)?;
    let (painted, texel_labels) = paint_lesions(mesh, lesions)?;
    let layout = SessionLayout::new(dir);
    for d in [layout.images_dir(), layout.depth_dir(), layout.masks_dir(), layout.gt_dir()] {
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    meshops::obj::write_obj(&layout.mesh_dir(), "body", &painted)?;
    camgeom::write_cameras(&layout.cameras(), &cams)?;

    let floor = cfg.visibility_floor();
    let per_view: Vec<(String, Vec<Detection2D>)> = cams
        .par_iter()
        .map(|cam| -> Result<(String, Vec<Detection2D>)> {
            let frags = render::rasterize_fragments(&painted, cam);
            let color = render::shade(&frags, &painted);
            let mask = render::subject_mask(&frags.depth, cam, &cfg.capture);
            let labels = render::sample_labels(
                &frags,
                &painted,
                &texel_labels.labels,
                texel_labels.width,
                texel_labels.height,
                NO_LABEL,
            );
            let gt = view_ground_truth(cam, &frags, &labels, lesions, floor);
            io::write_png(&layout.image(&cam.id), &color)?;
            io::write_pfm(&layout.depth(&cam.id), &frags.depth)?;
            io::write_png(&layout.mask(&cam.id), &io::mask_to_png(&mask))?;
            Ok((cam.id.clone(), gt))
        })
        .collect::<Result<_>>()?;
    let gt_detections: DetectionSet = per_view.into_iter().collect();
    crate::detect::write_detections(&layout.gt_detections(), &gt_detections)?;

    let index = meshops::VertexIndex::new(&painted.vertices);
    let bvh = TriangleBvh::new(&painted);
    let gt_lesions: Vec<GroundTruthLesion> = lesions
        .iter()
        .map(|l| {
            let hit = bvh.closest_point(&l.surface_point).expect("non-empty mesh");
            let visible_in = gt_detections
                .iter()
                .flat_map(|(img, dets)| {
                    dets.iter().filter(|d| d.lesion_id == Some(l.id)).map(move |d| MemberRef {
                        image_id: img.clone(),
                        det_id: d.det_id,
                    })
                })
                .collect();
            GroundTruthLesion {
                id: l.id,
                surface_point: l.surface_point,
                normal: painted.face_cross(hit.face).normalize(),
                diameter_mm: l.diameter_mm,
                color: l.color,
                nearest_vertex: index.nearest(&l.surface_point).expect("non-empty mesh").0,
                visible_in,
            }
        })
        .collect();
    let ground_truth = GroundTruthFile {
        seed,
        rig: cfg.clone(),
        lesions: gt_lesions,
    };
    io::write_json(&layout.gt_lesions(), &ground_truth)?;
    Ok(SynthesisReport {
        cameras: cams,
        ground_truth,
        gt_detections,
    })
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthFile> {
    io::read_json(path)
}
