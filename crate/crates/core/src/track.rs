//! Longitudinal tracking: lesions of one scan are carried to the next scan
//! through an ingested vertex correspondence and paired by edge-graph geodesic
//! distance with an optimal one-to-one assignment.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuse3d::LesionRegistry;
use crate::meshops::TriMesh;

pub const DEFAULT_MAX_GEODESIC: f64 = 0.05;

/// Index of the Euclidean-nearest vertex; ties resolve to the lowest index.
pub fn snap_to_vertex(point: &Point3<f64>, mesh: &TriMesh) -> Result<u32> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in mesh.vertices.iter().enumerate() {
        let d = (v - point).norm_squared();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i as u32)
        .ok_or_else(|| Error::param("cannot snap to an empty mesh"))
}

/// Undirected vertex graph of a mesh, weighted by Euclidean edge length.
#[derive(Debug, Clone)]
pub struct EdgeGraph {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<f64>,
}

impl EdgeGraph {
    pub fn new(mesh: &TriMesh) -> Self {
        let n = mesh.vertices.len();
        let edges = mesh.edges();
        let mut degree = vec![0usize; n];
        for &(a, b) in &edges {
            degree[a as usize] += 1;
            degree[b as usize] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + degree[i];
        }
        let mut fill = offsets.clone();
        let mut targets = vec![0u32; offsets[n]];
        let mut weights = vec![0f64; offsets[n]];
        for &(a, b) in &edges {
            let w = (mesh.vertices[a as usize] - mesh.vertices[b as usize]).norm();
            for (from, to) in [(a, b), (b, a)] {
                let slot = &mut fill[from as usize];
                targets[*slot] = to;
                weights[*slot] = w;
                *slot += 1;
            }
        }
        Self {
            offsets,
            targets,
            weights,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, v: u32) -> impl Iterator<Item = (u32, f64)> + '_ {
        let r = self.offsets[v as usize]..self.offsets[v as usize + 1];
        self.targets[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    /// Single-source shortest path lengths (Dijkstra); unreachable vertices
    /// get `+inf`.
    pub fn distances_from(&self, source: u32) -> Result<Vec<f64>> {
        let n = self.vertex_count();
        if source as usize >= n {
            return Err(Error::param(format!("source vertex {source} out of range ({n} vertices)")));
        }
        let mut dist = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[source as usize] = 0.0;
        heap.push(HeapEntry(0.0, source));
        while let Some(HeapEntry(d, v)) = heap.pop() {
            if done[v as usize] {
                continue;
            }
            done[v as usize] = true;
            for (u, w) in self.neighbors(v) {
                let nd = d + w;
                if nd < dist[u as usize] {
                    dist[u as usize] = nd;
                    heap.push(HeapEntry(nd, u));
                }
            }
        }
        Ok(dist)
    }
}

#[derive(PartialEq)]
struct HeapEntry(f64, u32);

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then vertex index
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Edge-graph geodesic distances from `source` to each of `targets`.
pub fn geodesic(mesh: &TriMesh, source: u32, targets: &[u32]) -> Result<Vec<f64>> {
    let n = mesh.vertices.len();
    if let Some(t) = targets.iter().find(|&&t| t as usize >= n) {
        return Err(Error::param(format!("target vertex {t} out of range ({n} vertices)")));
    }
    let dist = EdgeGraph::new(mesh).distances_from(source)?;
    Ok(targets.iter().map(|&t| dist[t as usize]).collect())
}

// ---------------------------------------------------------------- correspondence

/// Vertex correspondence: `pairs[i]` is the vertex of mesh B matching vertex
/// `i` of mesh A.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrespondenceMap {
    pub mesh_a_id: String,
    pub mesh_b_id: String,
    pub pairs: Vec<u32>,
}

impl CorrespondenceMap {
    pub fn identity(mesh_a_id: impl Into<String>, mesh_b_id: impl Into<String>, n: usize) -> Self {
        Self {
            mesh_a_id: mesh_a_id.into(),
            mesh_b_id: mesh_b_id.into(),
            pairs: (0..n as u32).collect(),
        }
    }

    pub fn validate(&self, vertices_a: usize, vertices_b: usize) -> Result<()> {
        if self.pairs.len() != vertices_a {
            return Err(Error::Input(format!(
                "correspondence has {} entries but mesh {} has {vertices_a} vertices",
                self.pairs.len(),
                self.mesh_a_id
            )));
        }
        if let Some(bad) = self.pairs.iter().find(|&&p| p as usize >= vertices_b) {
            return Err(Error::Input(format!(
                "correspondence index {bad} exceeds the {vertices_b} vertices of mesh {}",
                self.mesh_b_id
            )));
        }
        Ok(())
    }

    pub fn transfer(&self, vertex_in_a: u32) -> Result<u32> {
        self.pairs.get(vertex_in_a as usize).copied().ok_or_else(|| {
            Error::param(format!(
                "vertex {vertex_in_a} outside correspondence of length {}",
                self.pairs.len()
            ))
        })
    }
}

pub fn transfer(vertex_in_a: u32, corr: &CorrespondenceMap) -> Result<u32> {
    corr.transfer(vertex_in_a)
}

pub fn read_correspondence(path: &Path) -> Result<CorrespondenceMap> {
    crate::io::read_json(path)
}

pub fn write_correspondence(path: &Path, corr: &CorrespondenceMap) -> Result<()> {
    crate::io::write_json(path, corr)
}

// ---------------------------------------------------------------- assignment

/// Minimum-cost assignment for a rectangular cost matrix (`rows × cols`,
/// row-major, finite entries). Returns for every row its assigned column, or
/// `None` when there are more rows than columns and the row is left over.
pub fn solve_assignment(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    assert_eq!(cost.len(), rows * cols, "cost matrix size mismatch");
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let transposed: Vec<f64> = (0..cols * rows).map(|k| cost[(k % rows) * cols + k / rows]).collect();
        let by_col = solve_assignment(&transposed, cols, rows);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    // shortest augmenting path with potentials, 1-based with a virtual column 0
    let (n, m) = (rows, cols);
    let a = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

// ---------------------------------------------------------------- matching

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMatch {
    pub lesion_t: u32,
    /// Assigned lesion of the later scan; absent when none was available.
    pub lesion_t1: Option<u32>,
    /// Geodesic distance to the assigned lesion; absent when unreachable.
    pub geodesic_residual: Option<f64>,
    pub matched: bool,
}

/// Cost used in the assignment for pairs on disconnected components.
const UNREACHABLE_COST: f64 = 1e9;

pub fn match_lesions(
    lesions_t: &LesionRegistry,
    lesions_t1: &LesionRegistry,
    corr: &CorrespondenceMap,
    mesh_t1: &TriMesh,
    max_geodesic: f64,
) -> Result<Vec<LesionMatch>> {
    if lesions_t.lesions.is_empty() || lesions_t1.lesions.is_empty() {
        return Ok(Vec::new());
    }
    if !(max_geodesic >= 0.0) {
        return Err(Error::param(format!("max_geodesic must be non-negative, got {max_geodesic}")));
    }
    let n_t1 = mesh_t1.vertices.len();
    if let Some(bad) = corr.pairs.iter().find(|&&p| p as usize >= n_t1) {
        return Err(Error::Input(format!(
            "correspondence index {bad} exceeds the {n_t1} vertices of the later mesh"
        )));
    }
    let targets: Vec<u32> = lesions_t1.lesions.iter().map(|l| l.nearest_vertex).collect();
    if let Some(t) = targets.iter().find(|&&t| t as usize >= n_t1) {
        return Err(Error::Input(format!("lesion vertex {t} outside the later mesh")));
    }
    let graph = EdgeGraph::new(mesh_t1);
    let rows: Vec<Vec<f64>> = lesions_t
        .lesions
        .par_iter()
        .map(|l| {
            let v = corr.transfer(l.nearest_vertex)?;
            let dist = graph.distances_from(v)?;
            Ok(targets.iter().map(|&t| dist[t as usize]).collect())
        })
        .collect::<Result<_>>()?;
    let (r, c) = (rows.len(), targets.len());
    let cost: Vec<f64> = rows
        .iter()
        .flat_map(|row| row.iter().map(|&d| if d.is_finite() { d } else { UNREACHABLE_COST }))
        .collect();
    let assignment = solve_assignment(&cost, r, c);
    Ok(lesions_t
        .lesions
        .iter()
        .zip(assignment)
        .enumerate()
        .map(|(i, (l, a))| match a {
            Some(j) => {
                let d = rows[i][j];
                LesionMatch {
                    lesion_t: l.global_id,
                    lesion_t1: Some(lesions_t1.lesions[j].global_id),
                    geodesic_residual: d.is_finite().then_some(d),
                    matched: d <= max_geodesic,
                }
            }
            None => LesionMatch {
                lesion_t: l.global_id,
                lesion_t1: None,
                geodesic_residual: None,
                matched: false,
            },
        })
        .collect())
}

/// Fraction of ground-truth pairs reproduced by matched predictions.
pub fn longitudinal_accuracy(predicted: &[LesionMatch], ground_truth: &[LesionMatch]) -> Result<f64> {
    let truth: HashSet<(u32, u32)> = ground_truth
        .iter()
        .filter(|m| m.matched)
        .filter_map(|m| m.lesion_t1.map(|t1| (m.lesion_t, t1)))
        .collect();
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("ground truth holds no lesion pairs".into()));
    }
    let predicted: HashSet<(u32, u32)> = predicted
        .iter()
        .filter(|m| m.matched)
        .filter_map(|m| m.lesion_t1.map(|t1| (m.lesion_t, t1)))
        .collect();
    Ok(truth.intersection(&predicted).count() as f64 / truth.len() as f64)
}

/// Contents of `tracks.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracksFile {
    pub pairs: Vec<LesionMatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_t: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_t1: Option<String>,
    pub max_geodesic: f64,
}

pub fn read_tracks(path: &Path) -> Result<TracksFile> {
    crate::io::read_json(path)
}

pub fn write_tracks(path: &Path, tracks: &TracksFile) -> Result<()> {
    crate::io::write_json(path, tracks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuse3d::GlobalLesion;
    use crate::meshops::primitives;
    use nalgebra::Vector3;

    fn lesion(id: u32, v: u32, mesh: &TriMesh) -> GlobalLesion {
        GlobalLesion {
            global_id: id,
            centroid: mesh.vertices[v as usize],
            normal: mesh.vertex_normals[v as usize],
            nearest_vertex: v,
            members: Vec::new(),
        }
    }

    fn registry(ls: Vec<GlobalLesion>) -> LesionRegistry {
        LesionRegistry {
            lesions: ls,
            ..Default::default()
        }
    }

    #[test]
    fn snapping_and_ties() {
        let mesh = primitives::icosphere(1.0, 2);
        assert_eq!(snap_to_vertex(&mesh.vertices[7], &mesh).unwrap(), 7);
        let mid = Point3::from((mesh.vertices[2].coords + mesh.vertices[9].coords) / 2.0);
        let d2 = (mesh.vertices[2] - mid).norm_squared();
        let closer = mesh.vertices.iter().enumerate().filter(|(_, v)| (*v - mid).norm_squared() < d2).count();
        if closer == 0 {
            assert_eq!(snap_to_vertex(&mid, &mesh).unwrap(), 2);
        }
        let tri = TriMesh::new(
            vec![Point3::new(-1.0, 0.0, 0.0), Point3::new(0.0, 5.0, 0.0), Point3::new(1.0, 0.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert_eq!(snap_to_vertex(&Point3::origin(), &tri).unwrap(), 0);
    }

    #[test]
    fn geodesic_basics() {
        let tri = TriMesh::new(
            vec![Point3::origin(), Point3::new(0.3, 0.0, 0.0), Point3::new(0.0, 0.4, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert_eq!(geodesic(&tri, 0, &[0, 1]).unwrap(), vec![0.0, 0.3]);
        assert!(geodesic(&tri, 5, &[0]).is_err());
        assert!(geodesic(&tri, 0, &[3]).is_err());
    }

    #[test]
    fn disconnected_is_infinite() {
        let a = primitives::icosphere(1.0, 0);
        let b = a.map_vertices(|p| p + Vector3::new(5.0, 0.0, 0.0));
        let n = a.vertices.len() as u32;
        let mut verts = a.vertices.clone();
        verts.extend(b.vertices.iter().copied());
        let mut faces = a.faces.clone();
        faces.extend(b.faces.iter().map(|f| f.map(|v| v + n)));
        let mesh = TriMesh::new(verts, faces).unwrap();
        assert!(geodesic(&mesh, 0, &[n]).unwrap()[0].is_infinite());
    }

    #[test]
    fn transfer_examples() {
        let id = CorrespondenceMap::identity("a", "b", 10);
        assert_eq!(transfer(5, &id).unwrap(), 5);
        let perm = CorrespondenceMap {
            mesh_a_id: "a".into(),
            mesh_b_id: "b".into(),
            pairs: vec![2, 0, 1],
        };
        assert_eq!(transfer(0, &perm).unwrap(), 2);
        assert!(transfer(3, &perm).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("correspondence.json");
        write_correspondence(&path, &perm).unwrap();
        assert_eq!(read_correspondence(&path).unwrap(), perm);
        assert!(perm.validate(3, 3).is_ok());
        assert!(perm.validate(4, 3).is_err());
        assert!(perm.validate(3, 2).is_err());
    }

    fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row * n + j] + rec(cost, n, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, n, 0, &mut vec![false; n])
    }

    #[test]
    fn assignment_is_optimal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in 1..=6 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
                let a = solve_assignment(&cost, n, n);
                let total: f64 = a.iter().enumerate().map(|(i, j)| cost[i * n + j.unwrap()]).sum();
                assert!((total - brute_force_assignment(&cost, n)).abs() < 1e-12);
            }
        }
        // rectangular in both orientations
        let cost = vec![5.0, 1.0, 9.0, 2.0, 8.0, 7.0];
        assert_eq!(solve_assignment(&cost, 2, 3), vec![Some(1), Some(0)]);
        let tall = vec![5.0, 2.0, 1.0, 8.0, 9.0, 7.0];
        assert_eq!(solve_assignment(&tall, 3, 2), vec![Some(1), Some(0), None]);
    }

    #[test]
    fn identity_matching_has_zero_cost() {
        let mesh = primitives::icosphere(1.0, 3);
        let reg = registry(vec![lesion(0, 3, &mesh), lesion(1, 100, &mesh), lesion(2, 500, &mesh)]);
        let corr = CorrespondenceMap::identity("a", "b", mesh.vertices.len());
        let m = match_lesions(&reg, &reg, &corr, &mesh, 0.05).unwrap();
        for (i, x) in m.iter().enumerate() {
            assert!(x.matched);
            assert_eq!(x.lesion_t, i as u32);
            assert_eq!(x.lesion_t1, Some(i as u32));
            assert_eq!(x.geodesic_residual, Some(0.0));
        }
        assert!(match_lesions(&registry(vec![]), &reg, &corr, &mesh, 0.05).unwrap().is_empty());
    }

    #[test]
    fn crossing_nearest_neighbours_resolve_one_to_one() {
        // strip of vertices along x; A at 0.0, B at 0.1; targets A' at 0.06, B' at 0.2
        let xs = [0.0, 0.04, 0.06, 0.1, 0.2];
        let mut verts = Vec::new();
        let mut faces = Vec::new();
        for (i, &x) in xs.iter().enumerate() {
            verts.push(Point3::new(x, 0.0, 0.0));
            verts.push(Point3::new(x, 0.001, 0.0));
            if i + 1 < xs.len() {
                let (a, b) = (2 * i as u32, 2 * i as u32 + 1);
                faces.push([a, a + 2, b]);
                faces.push([b, a + 2, a + 3]);
            }
        }
        let mesh = TriMesh::new(verts, faces).unwrap();
        let t = registry(vec![lesion(0, 0, &mesh), lesion(1, 6, &mesh)]);
        let t1 = registry(vec![lesion(0, 4, &mesh), lesion(1, 8, &mesh)]);
        let corr = CorrespondenceMap::identity("a", "b", mesh.vertices.len());
        let m = match_lesions(&t, &t1, &corr, &mesh, 1.0).unwrap();
        let pairs: Vec<_> = m.iter().map(|x| x.lesion_t1.unwrap()).collect();
        assert_ne!(pairs[0], pairs[1]);
        let total: f64 = m.iter().map(|x| x.geodesic_residual.unwrap()).sum();
        // greedy would give B the nearest target A' (0.04) and A the far one (0.2)
        let greedy = 0.04 + 0.2;
        assert!(total <= greedy + 1e-12);
        assert!((total - 0.16).abs() < 1e-9);
    }

    #[test]
    fn residual_above_threshold_is_unmatched() {
        let mesh = primitives::icosphere(1.0, 2);
        let t = registry(vec![lesion(0, 0, &mesh)]);
        let t1 = registry(vec![lesion(0, 5, &mesh)]);
        let corr = CorrespondenceMap::identity("a", "b", mesh.vertices.len());
        let m = match_lesions(&t, &t1, &corr, &mesh, 0.05).unwrap();
        assert!(!m[0].matched);
        assert!(m[0].geodesic_residual.unwrap() > 0.05);
    }

    fn pairs(n: usize, wrong: usize) -> (Vec<LesionMatch>, Vec<LesionMatch>) {
        let gt: Vec<LesionMatch> = (0..n as u32)
            .map(|i| LesionMatch {
                lesion_t: i,
                lesion_t1: Some(i),
                geodesic_residual: Some(0.0),
                matched: true,
            })
            .collect();
        let mut pred = gt.clone();
        for p in pred.iter_mut().take(wrong) {
            p.lesion_t1 = Some(p.lesion_t + 1000);
        }
        (pred, gt)
    }

    #[test]
    fn accuracy_examples() {
        let (p, g) = pairs(34, 2);
        assert!((longitudinal_accuracy(&p, &g).unwrap() - 32.0 / 34.0).abs() < 1e-12);
        let (p, g) = pairs(34, 10);
        assert!((longitudinal_accuracy(&p, &g).unwrap() - 24.0 / 34.0).abs() < 1e-12);
        let (p, g) = pairs(5, 0);
        assert_eq!(longitudinal_accuracy(&p, &g).unwrap(), 1.0);
        assert!(matches!(longitudinal_accuracy(&p, &[]), Err(Error::UndefinedMetric(_))));
    }
}
