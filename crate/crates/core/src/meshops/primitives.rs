//! Procedural test and phantom meshes.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use super::TriMesh;

/// Icosahedron refined `subdivisions` times with vertices pushed onto the
/// sphere of `radius` centered at the origin. Subdivision `k` has
/// `10 * 4^k + 2` vertices (k = 2 gives 162, k = 4 gives 2562).
pub fn icosphere(radius: f64, subdivisions: u32) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|v| Vector3::new(v[0], v[1], v[2]).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vector3<f64>>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = verts.into_iter().map(|v| Point3::from(v * radius)).collect();
    TriMesh::new(vertices, faces).expect("icosphere topology is valid")
}

/// Square `[0, size]²` in the plane `z = height`, split into `n × n` cells of
/// two triangles each, with planar UVs.
pub fn grid_square(size: f64, n: u32, height: f64) -> TriMesh {
    let n = n.max(1);
    let mut vertices = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            vertices.push(Point3::new(
                size * f64::from(i) / f64::from(n),
                size * f64::from(j) / f64::from(n),
                height,
            ));
        }
    }
    let idx = |i: u32, j: u32| j * (n + 1) + i;
    let mut faces = Vec::new();
    let mut uvs = Vec::new();
    let uv = |i: u32, j: u32| [f64::from(i) / f64::from(n), f64::from(j) / f64::from(n)];
    for j in 0..n {
        for i in 0..n {
            faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            uvs.push([uv(i, j), uv(i + 1, j), uv(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            uvs.push([uv(i, j), uv(i + 1, j + 1), uv(i, j + 1)]);
        }
    }
    TriMesh::new(vertices, faces)
        .and_then(|m| m.with_texture(uvs, None))
        .expect("grid topology is valid")
}

/// Closed surface of revolution about the world y axis.
///
/// `profile` lists `(y, radius)` samples from bottom to top; the first and
/// last radii should be zero so the surface closes at the poles. The surface
/// gets `segments` vertices per ring, outward normals and a cylindrical UV
/// map (`u` = azimuth fraction, `v` = arc-length fraction along the profile).
pub fn revolve(profile: &[(f64, f64)], segments: u32) -> TriMesh {
    assert!(profile.len() >= 3 && segments >= 3);
    let segments = segments as usize;
    let mut arc = vec![0.0];
    for w in profile.windows(2) {
        let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        arc.push(arc.last().unwrap() + d);
    }
    let total = *arc.last().unwrap();
    let v_of = |k: usize| arc[k] / total;

    let mut vertices = Vec::new();
    // ring k -> first vertex index; pole rings collapse to one vertex
    let mut ring_start = Vec::with_capacity(profile.len());
    for &(y, r) in profile {
        ring_start.push(vertices.len() as u32);
        if r <= 0.0 {
            vertices.push(Point3::new(0.0, y, 0.0));
        } else {
            for s in 0..segments {
                let theta = std::f64::consts::TAU * s as f64 / segments as f64;
                // azimuth measured from +z towards +x
                vertices.push(Point3::new(r * theta.sin(), y, r * theta.cos()));
            }
        }
    }
    let is_pole = |k: usize| profile[k].1 <= 0.0;
    let vid = |k: usize, s: usize| -> u32 {
        if is_pole(k) {
            ring_start[k]
        } else {
            ring_start[k] + (s % segments) as u32
        }
    };
    let u_of = |s: usize| s as f64 / segments as f64;

    let mut faces = Vec::new();
    let mut uvs = Vec::new();
    for k in 0..profile.len() - 1 {
        let (v0, v1) = (v_of(k), v_of(k + 1));
        for s in 0..segments {
            let (a, b) = (vid(k, s), vid(k, s + 1));
            let (c, d) = (vid(k + 1, s), vid(k + 1, s + 1));
            let (ua, ub) = (u_of(s), u_of(s + 1));
            let um = (ua + ub) / 2.0;
            // winding chosen so face normals point away from the axis
            if !is_pole(k) && !is_pole(k + 1) {
                faces.push([a, b, d]);
                uvs.push([[ua, v0], [ub, v0], [ub, v1]]);
                faces.push([a, d, c]);
                uvs.push([[ua, v0], [ub, v1], [ua, v1]]);
            } else if is_pole(k) && !is_pole(k + 1) {
                faces.push([a, d, c]);
                uvs.push([[um, v0], [ub, v1], [ua, v1]]);
            } else if !is_pole(k) && is_pole(k + 1) {
                faces.push([a, b, c]);
                uvs.push([[ua, v0], [ub, v0], [um, v1]]);
            }
        }
    }
    TriMesh::new(vertices, faces)
        .and_then(|m| m.with_texture(uvs, None))
        .expect("revolved topology is valid")
}

/// Vertical capsule of `radius` standing on `y = base` with total height
/// `height`, sampled with `rings` profile intervals and `segments` around.
pub fn capsule(radius: f64, height: f64, base: f64, rings: u32, segments: u32) -> TriMesh {
    let cap_rings = (rings / 8).max(4);
    let body_rings = rings.saturating_sub(2 * cap_rings).max(1);
    let mut profile = Vec::new();
    let y0 = base + radius;
    let y1 = base + height - radius;
    for i in 0..=cap_rings {
        let phi = -std::f64::consts::FRAC_PI_2 * (1.0 - f64::from(i) / f64::from(cap_rings));
        profile.push((y0 + radius * phi.sin(), radius * phi.cos().max(0.0)));
    }
    for i in 1..body_rings {
        let t = f64::from(i) / f64::from(body_rings);
        profile.push((y0 + (y1 - y0) * t, radius));
    }
    for i in 0..=cap_rings {
        let phi = std::f64::consts::FRAC_PI_2 * f64::from(i) / f64::from(cap_rings);
        profile.push((y1 + radius * phi.sin(), radius * phi.cos().max(0.0)));
    }
    profile[0].1 = 0.0;
    let last = profile.len() - 1;
    profile[last].1 = 0.0;
    revolve(&profile, segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        assert_eq!(icosphere(1.0, 0).vertices.len(), 12);
        assert_eq!(icosphere(1.0, 2).vertices.len(), 162);
        let s4 = icosphere(1.0, 4);
        assert_eq!(s4.vertices.len(), 2562);
        assert_eq!(s4.faces.len(), 5120);
    }

    #[test]
    fn icosphere_normals_point_outwards() {
        let s = icosphere(2.0, 1);
        for f in 0..s.faces.len() {
            let [a, b, c] = s.triangle(f);
            let centroid = (a.coords + b.coords + c.coords) / 3.0;
            assert!(s.face_cross(f).dot(&centroid) > 0.0);
        }
    }

    #[test]
    fn capsule_is_closed_outward_and_uv_mapped() {
        let m = capsule(0.15, 1.7, 0.0, 64, 32);
        let (lo, hi) = m.bounds().unwrap();
        assert!((lo.y - 0.0).abs() < 1e-12 && (hi.y - 1.7).abs() < 1e-12);
        assert_eq!(m.uvs.len(), m.faces.len());
        // closed manifold: every edge shared by exactly two faces
        let mut count = HashMap::new();
        for &[a, b, c] in &m.faces {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                *count.entry((u.min(v), u.max(v))).or_insert(0) += 1;
            }
        }
        assert!(count.values().all(|&c| c == 2));
        for f in 0..m.faces.len() {
            let [a, b, c] = m.triangle(f);
            let centroid = Point3::from((a.coords + b.coords + c.coords) / 3.0);
            let axis = Point3::new(0.0, centroid.y.clamp(0.15, 1.55), 0.0);
            assert!(m.face_cross(f).dot(&(centroid - axis)) > 0.0, "face {f} points inwards");
        }
        // area close to the analytic capsule area
        let r: f64 = 0.15;
        let analytic = 4.0 * std::f64::consts::PI * r * r + std::f64::consts::TAU * r * (1.7 - 2.0 * r);
        assert!((m.surface_area() - analytic).abs() / analytic < 0.01);
    }
}
