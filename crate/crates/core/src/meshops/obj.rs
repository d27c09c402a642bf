//! Wavefront OBJ (+ MTL + one texture) reading and writing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Point3;

use super::TriMesh;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Corner {
    v: u32,
    vt: Option<u32>,
}

fn resolve(index: i64, count: usize, what: &str, path: &Path, line: usize) -> Result<u32> {
    let resolved = if index > 0 {
        index - 1
    } else if index < 0 {
        count as i64 + index
    } else {
        -1
    };
    if resolved < 0 || resolved as usize >= count {
        return Err(Error::parse(
            path,
            format!("line {line}: {what} index {index} out of range ({count} defined)"),
        ));
    }
    Ok(resolved as u32)
}

/// Parses OBJ text. Polygons are fan-triangulated and faces that collapse to
/// repeated vertices are dropped. Returns the mesh and the texture path named
/// by the first `map_Kd` found through `mtllib` (relative to `base_dir`).
pub fn parse_obj(text: &str, base_dir: &Path, origin: &Path) -> Result<(TriMesh, Option<PathBuf>)> {
    let mut positions: Vec<Point3<f64>> = Vec::new();
    let mut texcoords: Vec<[f64; 2]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut face_uvs: Vec<Option<[[f64; 2]; 3]>> = Vec::new();
    let mut mtllibs: Vec<String> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let num = |s: Option<&str>| -> Result<f64> {
            s.ok_or_else(|| Error::parse(origin, format!("line {}: missing number", lineno + 1)))?
                .parse::<f64>()
                .map_err(|e| Error::parse(origin, format!("line {}: {e}", lineno + 1)))
        };
        match tag {
            "v" => {
                let (x, y, z) = (num(it.next())?, num(it.next())?, num(it.next())?);
                positions.push(Point3::new(x, y, z));
            }
            "vt" => {
                let u = num(it.next())?;
                let v = it.next().map(|s| num(Some(s))).transpose()?.unwrap_or(0.0);
                texcoords.push([u, v]);
            }
            "f" => {
                let mut corners = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    let parse_idx = |s: &str| -> Result<i64> {
                        s.parse::<i64>()
                            .map_err(|e| Error::parse(origin, format!("line {}: bad index {s:?}: {e}", lineno + 1)))
                    };
                    let v = parse_idx(parts.next().unwrap_or(""))?;
                    let vt = match parts.next() {
                        Some(s) if !s.is_empty() => Some(resolve(parse_idx(s)?, texcoords.len(), "vt", origin, lineno + 1)?),
                        _ => None,
                    };
                    corners.push(Corner {
                        v: resolve(v, positions.len(), "v", origin, lineno + 1)?,
                        vt,
                    });
                }
                if corners.len() < 3 {
                    return Err(Error::parse(origin, format!("line {}: face with fewer than 3 vertices", lineno + 1)));
                }
                for k in 1..corners.len() - 1 {
                    let tri = [corners[0], corners[k], corners[k + 1]];
                    let ids = tri.map(|c| c.v);
                    if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                        continue;
                    }
                    faces.push(ids);
                    let uv = if tri.iter().all(|c| c.vt.is_some()) {
                        Some(tri.map(|c| texcoords[c.vt.unwrap() as usize]))
                    } else {
                        None
                    };
                    face_uvs.push(uv);
                }
            }
            "mtllib" => {
                let rest = line["mtllib".len()..].trim();
                if !rest.is_empty() {
                    mtllibs.push(rest.to_string());
                }
            }
            _ => {}
        }
    }

    let uvs = if face_uvs.iter().any(Option::is_some) {
        face_uvs
            .into_iter()
            .map(|uv| uv.unwrap_or([[0.0, 0.0]; 3]))
            .collect()
    } else {
        Vec::new()
    };
    let mesh = TriMesh::new(positions, faces)?.with_texture(uvs, None)?;

    let mut texture_path = None;
    for lib in mtllibs {
        let mtl_path = base_dir.join(&lib);
        let Ok(mtl) = std::fs::read_to_string(&mtl_path) else { continue };
        if let Some(map) = mtl.lines().find_map(|l| {
            let l = l.trim();
            l.strip_prefix("map_Kd").map(|rest| rest.trim().to_string())
        }) {
            // options such as `-s 1 1 1` precede the file name; keep the last token
            let file = map.split_whitespace().last().unwrap_or("").to_string();
            if !file.is_empty() {
                texture_path = Some(mtl_path.parent().unwrap_or(base_dir).join(file));
                break;
            }
        }
    }
    Ok((mesh, texture_path))
}

/// Loads an OBJ file together with its texture image when the MTL names one.
pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let (mut mesh, texture) = parse_obj(&text, base, path)?;
    if let Some(tex) = texture {
        if tex.exists() {
            mesh.texture = Some(image::open(&tex)?.to_rgb8());
        }
    }
    Ok(mesh)
}

/// Serializes the mesh as OBJ text. UVs are written one per face corner.
pub fn to_obj_string(mesh: &TriMesh, mtllib: Option<&str>) -> String {
    let mut out = String::with_capacity(mesh.vertices.len() * 40 + mesh.faces.len() * 60);
    if let Some(lib) = mtllib {
        let _ = writeln!(out, "mtllib {lib}");
        let _ = writeln!(out, "usemtl skin");
    }
    for p in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
    }
    let textured = !mesh.uvs.is_empty();
    if textured {
        for tri in &mesh.uvs {
            for uv in tri {
                let _ = writeln!(out, "vt {} {}", uv[0], uv[1]);
            }
        }
    }
    for (i, f) in mesh.faces.iter().enumerate() {
        if textured {
            let t = 3 * i + 1;
            let _ = writeln!(out, "f {}/{} {}/{} {}/{}", f[0] + 1, t, f[1] + 1, t + 1, f[2] + 1, t + 2);
        } else {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
    }
    out
}

/// Writes `<stem>.obj`, and when textured `<stem>.mtl` plus `texture.png`,
/// into `dir`. Returns the OBJ path.
pub fn write_obj(dir: &Path, stem: &str, mesh: &TriMesh) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let obj_path = dir.join(format!("{stem}.obj"));
    let mtl_name = format!("{stem}.mtl");
    let has_texture = mesh.texture.is_some();
    let text = to_obj_string(mesh, has_texture.then_some(mtl_name.as_str()));
    crate::io::write_atomic(&obj_path, text.as_bytes())?;
    if let Some(tex) = &mesh.texture {
        let mtl = "newmtl skin\nKa 1 1 1\nKd 1 1 1\nmap_Kd texture.png\n";
        crate::io::write_atomic(&dir.join(&mtl_name), mtl.as_bytes())?;
        crate::io::write_png(&dir.join("texture.png"), tex)?;
    }
    Ok(obj_path)
}
