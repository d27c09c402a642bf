//! Lifting 2-D detections to 3-D and fusing multi-view sightings into unique
//! lesions by average-linkage agglomerative clustering.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{Point2, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camgeom::CameraRecord;
use crate::detect::{Detection2D, DetectionSet};
use crate::error::{Error, Result};
use crate::meshops::{TriMesh, VertexIndex};
use crate::render::{DepthImage, SubjectMask};

pub const DEFAULT_DISTANCE_THRESHOLD: f64 = 0.02;
pub const DEFAULT_MIN_CLUSTER_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiftStatus {
    CenterHit,
    FallbackHit,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MemberRef {
    pub image_id: String,
    pub det_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sighting3D {
    pub image_id: String,
    pub det_id: u32,
    pub point: Point3<f64>,
    pub lift_status: LiftStatus,
}

impl Sighting3D {
    pub fn member(&self) -> MemberRef {
        MemberRef {
            image_id: self.image_id.clone(),
            det_id: self.det_id,
        }
    }
}

/// Rasters of one camera needed to lift its detections.
#[derive(Debug, Clone)]
pub struct ViewData {
    pub camera: CameraRecord,
    pub depth: DepthImage,
    pub mask: SubjectMask,
}

/// Lifts the box center to 3-D. When the center pixel is off-subject, the
/// masked pixel inside the box nearest to the center is used instead (ties
/// by row, then column). Returns `None` when the box holds no masked pixel.
pub fn lift(det: &Detection2D, depth: &DepthImage, mask: &SubjectMask, cam: &CameraRecord) -> Option<Sighting3D> {
    let (w, h) = (i64::from(mask.width), i64::from(mask.height));
    if w == 0 || h == 0 {
        return None;
    }
    let (fx, fy) = det.bbox.center_pixel();
    let cx = (fx.round() as i64).clamp(0, w - 1);
    let cy = (fy.round() as i64).clamp(0, h - 1);
    let usable = |x: i64, y: i64| mask.get(x as u32, y as u32) && depth.get(x as u32, y as u32).is_finite();

    let (px, py, status) = if usable(cx, cy) {
        (cx, cy, LiftStatus::CenterHit)
    } else {
        // pixels whose centers lie inside the box
        let x0 = ((det.bbox.x - 0.5).ceil() as i64).max(0);
        let x1 = ((det.bbox.x + det.bbox.w - 0.5).floor() as i64).min(w - 1);
        let y0 = ((det.bbox.y - 0.5).ceil() as i64).max(0);
        let y1 = ((det.bbox.y + det.bbox.h - 0.5).floor() as i64).min(h - 1);
        let mut best: Option<(i64, i64, i64)> = None;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if !usable(x, y) {
                    continue;
                }
                let d2 = (x - cx).pow(2) + (y - cy).pow(2);
                if best.is_none_or(|(bd, _, _)| d2 < bd) {
                    best = Some((d2, x, y));
                }
            }
        }
        let (_, x, y) = best?;
        (x, y, LiftStatus::FallbackHit)
    };
    let d = f64::from(depth.get(px as u32, py as u32));
    let point = cam.unproject(&Point2::new(px as f64, py as f64), d).ok()?;
    Some(Sighting3D {
        image_id: det.image_id.clone(),
        det_id: det.det_id,
        point,
        lift_status: status,
    })
}

/// Lifts every non-removed detection. Returns sightings (ordered by image id,
/// then detection order) and the detections that could not be lifted.
pub fn lift_all(dets: &DetectionSet, views: &HashMap<String, ViewData>) -> Result<(Vec<Sighting3D>, Vec<MemberRef>)> {
    let mut jobs = Vec::new();
    for (image_id, list) in dets {
        let view = views
            .get(image_id)
            .ok_or_else(|| Error::Input(format!("no camera data for image {image_id}")))?;
        jobs.extend(list.iter().filter(|d| !d.removed).map(|d| (d, view)));
    }
    let lifted: Vec<(MemberRef, Option<Sighting3D>)> = jobs
        .par_iter()
        .map(|(d, v)| {
            (
                MemberRef {
                    image_id: d.image_id.clone(),
                    det_id: d.det_id,
                },
                lift(d, &v.depth, &v.mask, &v.camera),
            )
        })
        .collect();
    let mut sightings = Vec::new();
    let mut off_subject = Vec::new();
    for (m, s) in lifted {
        match s {
            Some(s) => sightings.push(s),
            None => off_subject.push(m),
        }
    }
    Ok((sightings, off_subject))
}

// ---------------------------------------------------------------- clustering

/// One merge of the average-linkage dendrogram, identified by a
/// representative point of each merged cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Average-linkage dendrogram by the nearest-neighbor-chain algorithm with
/// Lance–Williams updates. Merges are returned in the order found, which is
/// not necessarily by height.
pub fn average_linkage(points: &[Point3<f64>]) -> Vec<Merge> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = (points[i] - points[j]).norm();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut remaining = n;
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut merges = Vec::with_capacity(n - 1);
    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster"));
        }
        let a = *chain.last().unwrap();
        let prev = chain.len().checked_sub(2).map(|i| chain[i]);
        // nearest active neighbor; the chain predecessor wins ties so the chain terminates
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        if let Some(p) = prev {
            best = p;
            best_d = dist[a * n + p];
        }
        for k in 0..n {
            if k == a || !active[k] {
                continue;
            }
            let d = dist[a * n + k];
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        if Some(best) == prev {
            chain.pop();
            chain.pop();
            let (keep, gone) = (a.min(best), a.max(best));
            merges.push(Merge {
                a: keep,
                b: gone,
                height: best_d,
            });
            let (sk, sg) = (size[keep] as f64, size[gone] as f64);
            for k in 0..n {
                if !active[k] || k == keep || k == gone {
                    continue;
                }
                let d = (sk * dist[keep * n + k] + sg * dist[gone * n + k]) / (sk + sg);
                dist[keep * n + k] = d;
                dist[k * n + keep] = d;
            }
            size[keep] += size[gone];
            active[gone] = false;
            remaining -= 1;
        } else {
            chain.push(best);
        }
    }
    merges
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Partition of point indices obtained by cutting the average-linkage
/// dendrogram at `threshold` (merges with linkage ≤ threshold are applied).
/// Groups are sorted internally and ordered by their smallest index.
pub fn average_linkage_partition(points: &[Point3<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for m in average_linkage(points) {
        if m.height <= threshold {
            let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Clustering {
    /// Indices into the input sightings; each group has ≥ min_cluster_size members.
    pub clusters: Vec<Vec<usize>>,
    pub rejected: Vec<Vec<usize>>,
}

pub fn cluster(sightings: &[Sighting3D], distance_threshold: f64, min_cluster_size: usize) -> Result<Clustering> {
    if !(distance_threshold > 0.0) {
        return Err(Error::param(format!(
            "distance threshold must be positive, got {distance_threshold}"
        )));
    }
    let points: Vec<Point3<f64>> = sightings.iter().map(|s| s.point).collect();
    let mut out = Clustering::default();
    for group in average_linkage_partition(&points, distance_threshold) {
        if group.len() >= min_cluster_size {
            out.clusters.push(group);
        } else {
            out.rejected.push(group);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- registry

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalLesion {
    pub global_id: u32,
    pub centroid: Point3<f64>,
    pub normal: Vector3<f64>,
    pub nearest_vertex: u32,
    pub members: Vec<MemberRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedCluster {
    pub centroid: Point3<f64>,
    pub members: Vec<MemberRef>,
}

/// Contents of `lesions3d.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LesionRegistry {
    pub lesions: Vec<GlobalLesion>,
    #[serde(default)]
    pub rejected: Vec<RejectedCluster>,
    /// Detections whose boxes held no on-subject pixel.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub off_subject: Vec<MemberRef>,
}

impl LesionRegistry {
    pub fn lesion(&self, global_id: u32) -> Option<&GlobalLesion> {
        self.lesions.iter().find(|l| l.global_id == global_id)
    }

    /// Global id of the lesion a detection belongs to, if any.
    pub fn lesion_of(&self, image_id: &str, det_id: u32) -> Option<&GlobalLesion> {
        self.lesions
            .iter()
            .find(|l| l.members.iter().any(|m| m.image_id == image_id && m.det_id == det_id))
    }
}

fn centroid(points: impl Iterator<Item = Point3<f64>>) -> Point3<f64> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for p in points {
        sum += p.coords;
        n += 1;
    }
    Point3::from(sum / n.max(1) as f64)
}

/// Azimuth about the vertical axis, measured from +z towards +x, in `[0, 2π)`.
pub fn azimuth(p: &Point3<f64>) -> f64 {
    let a = p.x.atan2(p.z);
    if a < 0.0 {
        a + std::f64::consts::TAU
    } else {
        a
    }
}

/// Builds global lesions from clusters. Ids are assigned in order of
/// centroid height, then azimuth.
pub fn build_registry(sightings: &[Sighting3D], clustering: &Clustering, mesh: &TriMesh) -> Result<LesionRegistry> {
    if mesh.vertices.is_empty() {
        return Err(Error::param("registry needs a non-empty mesh"));
    }
    let index = VertexIndex::new(&mesh.vertices);
    let members_of = |group: &[usize]| -> Vec<MemberRef> {
        let mut m: Vec<MemberRef> = group.iter().map(|&i| sightings[i].member()).collect();
        m.sort();
        m
    };
    let mut lesions: Vec<GlobalLesion> = clustering
        .clusters
        .iter()
        .map(|group| {
            let c = centroid(group.iter().map(|&i| sightings[i].point));
            let (v, _) = index.nearest(&c).expect("non-empty index");
            GlobalLesion {
                global_id: 0,
                centroid: c,
                normal: mesh.vertex_normals[v as usize],
                nearest_vertex: v,
                members: members_of(group),
            }
        })
        .collect();
    lesions.sort_by(|a, b| {
        a.centroid
            .y
            .total_cmp(&b.centroid.y)
            .then(azimuth(&a.centroid).total_cmp(&azimuth(&b.centroid)))
            .then_with(|| a.members.cmp(&b.members))
    });
    for (i, l) in lesions.iter_mut().enumerate() {
        l.global_id = i as u32;
    }
    let mut rejected: Vec<RejectedCluster> = clustering
        .rejected
        .iter()
        .map(|group| RejectedCluster {
            centroid: centroid(group.iter().map(|&i| sightings[i].point)),
            members: members_of(group),
        })
        .collect();
    rejected.sort_by(|a, b| a.members.cmp(&b.members));
    Ok(LesionRegistry {
        lesions,
        rejected,
        off_subject: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuseParams {
    pub distance_threshold: f64,
    pub min_cluster_size: usize,
}

impl Default for FuseParams {
    fn default() -> Self {
        Self {
            distance_threshold: DEFAULT_DISTANCE_THRESHOLD,
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
        }
    }
}

/// Lift, cluster and build the registry in one step.
pub fn fuse(dets: &DetectionSet, views: &HashMap<String, ViewData>, mesh: &TriMesh, params: &FuseParams) -> Result<LesionRegistry> {
    let (sightings, off_subject) = lift_all(dets, views)?;
    let clustering = cluster(&sightings, params.distance_threshold, params.min_cluster_size)?;
    let mut registry = build_registry(&sightings, &clustering, mesh)?;
    registry.off_subject = off_subject;
    Ok(registry)
}

pub fn read_registry(path: &Path) -> Result<LesionRegistry> {
    crate::io::read_json(path)
}

pub fn write_registry(path: &Path, registry: &LesionRegistry) -> Result<()> {
    crate::io::write_json(path, registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camgeom::Intrinsics;
    use crate::detect::{BBox, DetectionSource};
    use crate::meshops::primitives;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sighting(i: usize, p: [f64; 3]) -> Sighting3D {
        Sighting3D {
            image_id: format!("I{i:03}"),
            det_id: 0,
            point: Point3::from(p),
            lift_status: LiftStatus::CenterHit,
        }
    }

    fn camera() -> CameraRecord {
        let k = Intrinsics::new(100.0, 100.0, 4.5, 4.5, 10, 10).unwrap();
        CameraRecord::new("A1", k, Matrix3::identity(), Point3::origin(), "").unwrap()
    }

    fn det(x: f64, y: f64, w: f64, h: f64) -> Detection2D {
        Detection2D::new("A1", 0, BBox::new(x, y, w, h), 0.9, DetectionSource::External)
    }

    #[test]
    fn lift_center_hit() {
        let cam = camera();
        let depth = DepthImage {
            width: 10,
            height: 10,
            values: vec![1.2; 100],
        };
        let mask = SubjectMask::full(10, 10);
        // box centered on pixel (3, 6)
        let s = lift(&det(2.0, 5.0, 3.0, 3.0), &depth, &mask, &cam).unwrap();
        assert_eq!(s.lift_status, LiftStatus::CenterHit);
        let expected = cam.unproject(&Point2::new(3.0, 6.0), f64::from(1.2f32)).unwrap();
        assert!((s.point - expected).norm() < 1e-12);
    }

    #[test]
    fn lift_off_subject_and_fallback() {
        let cam = camera();
        let mut depth = DepthImage::background(10, 10);
        let mut mask = SubjectMask {
            width: 10,
            height: 10,
            values: vec![false; 100],
        };
        assert!(lift(&det(2.0, 2.0, 4.0, 4.0), &depth, &mask, &cam).is_none());
        // only the box's corner pixel (2, 2) is on the subject
        mask.values[2 * 10 + 2] = true;
        depth.values[2 * 10 + 2] = 2.0;
        let s = lift(&det(2.0, 2.0, 4.0, 4.0), &depth, &mask, &cam).unwrap();
        assert_eq!(s.lift_status, LiftStatus::FallbackHit);
        let expected = cam.unproject(&Point2::new(2.0, 2.0), 2.0).unwrap();
        assert!((s.point - expected).norm() < 1e-12);
    }

    #[test]
    fn two_separated_triples() {
        let mut s: Vec<Sighting3D> = (0..3).map(|i| sighting(i, [0.0, 1.0, 0.0])).collect();
        s.extend((3..6).map(|i| sighting(i, [1.0, 1.0, 0.0])));
        let c = cluster(&s, 0.02, 3).unwrap();
        assert_eq!(c.clusters, vec![vec![0, 1, 2], vec![3, 4, 5]]);
        assert!(c.rejected.is_empty());
    }

    #[test]
    fn pair_is_rejected() {
        let s = vec![sighting(0, [0.0; 3]), sighting(1, [0.0; 3])];
        let c = cluster(&s, 0.02, 3).unwrap();
        assert!(c.clusters.is_empty());
        assert_eq!(c.rejected, vec![vec![0, 1]]);
        assert!(cluster(&[], 0.02, 3).unwrap().clusters.is_empty());
        assert!(cluster(&s, 0.0, 3).is_err());
    }

    /// Direct agglomeration: repeatedly merge the closest pair by mean
    /// pairwise distance recomputed from the raw points.
    fn brute_force(points: &[Point3<f64>], t: f64) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..groups.len() {
                for j in i + 1..groups.len() {
                    let mut sum = 0.0;
                    for &a in &groups[i] {
                        for &b in &groups[j] {
                            sum += (points[a] - points[b]).norm();
                        }
                    }
                    let d = sum / (groups[i].len() * groups[j].len()) as f64;
                    if best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, i, j));
                    }
                }
            }
            match best {
                Some((d, i, j)) if d <= t => {
                    let g = groups.remove(j);
                    groups[i].extend(g);
                }
                _ => break,
            }
        }
        for g in &mut groups {
            g.sort();
        }
        groups.sort();
        groups
    }

    #[test]
    fn matches_brute_force_agglomeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..=40);
            let pts: Vec<Point3<f64>> = (0..n)
                .map(|_| Point3::new(rng.random::<f64>() * 0.1, rng.random::<f64>() * 0.1, rng.random::<f64>() * 0.1))
                .collect();
            assert_eq!(average_linkage_partition(&pts, 0.02), brute_force(&pts, 0.02));
        }
    }

    #[test]
    fn registry_centroid_and_order() {
        let mesh = primitives::icosphere(1.0, 3);
        let s = vec![
            sighting(0, [0.0, 1.0, 0.0]),
            sighting(1, [0.0, 1.0, 0.02]),
            sighting(2, [0.0, 1.0, -0.02]),
            sighting(3, [1.0, 0.0, 0.0]),
            sighting(4, [1.0, 0.0, 0.0]),
            sighting(5, [1.0, 0.0, 0.0]),
        ];
        let c = cluster(&s, 0.05, 3).unwrap();
        let reg = build_registry(&s, &c, &mesh).unwrap();
        assert_eq!(reg.lesions.len(), 2);
        // lower centroid first
        assert!((reg.lesions[0].centroid - Point3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((reg.lesions[1].centroid - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        for l in &reg.lesions {
            let radial = l.centroid.coords.normalize();
            assert!(l.normal.dot(&radial) > 5f64.to_radians().cos());
        }
        assert_eq!(reg.lesion_of("I004", 0).unwrap().global_id, 0);
    }

    #[test]
    fn registry_json_round_trip() {
        let mesh = primitives::icosphere(1.0, 1);
        let s: Vec<Sighting3D> = (0..3).map(|i| sighting(i, [0.0, 0.0, 1.0])).collect();
        let reg = build_registry(&s, &cluster(&s, 0.02, 3).unwrap(), &mesh).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lesions3d.json");
        write_registry(&path, &reg).unwrap();
        assert_eq!(read_registry(&path).unwrap(), reg);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert!(v["lesions"][0]["centroid"].is_array());
        assert!(v["lesions"][0]["members"][0]["image_id"].is_string());
    }
}
