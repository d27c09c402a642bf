//! ASCII PLY point clouds (only the x, y, z vertex properties are used).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
}

pub fn parse_ply(text: &str, origin: &Path) -> Result<Vec<Point3<f64>>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::parse(origin, "missing 'ply' magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut ascii = false;
    loop {
        let Some(line) = lines.next() else {
            return Err(Error::parse(origin, "header not terminated by end_header"));
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(Error::parse(origin, format!("unsupported PLY format {fmt}")));
                }
                ascii = true;
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|e| Error::parse(origin, format!("bad element count: {e}")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", ..] => {
                if let Some(e) = elements.last_mut() {
                    e.props.push("<list>".into());
                }
            }
            ["property", _ty, name] => {
                if let Some(e) = elements.last_mut() {
                    e.props.push(name.to_string());
                }
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    if !ascii {
        return Err(Error::parse(origin, "missing format line"));
    }
    let mut points = Vec::new();
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                lines
                    .next()
                    .ok_or_else(|| Error::parse(origin, format!("truncated {} element", el.name)))?;
            }
            continue;
        }
        let pos = |n: &str| {
            el.props
                .iter()
                .position(|p| p == n)
                .ok_or_else(|| Error::parse(origin, format!("vertex element lacks property {n}")))
        };
        let (ix, iy, iz) = (pos("x")?, pos("y")?, pos("z")?);
        for i in 0..el.count {
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(origin, format!("expected {} vertices, got {i}", el.count)))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            let get = |k: usize| -> Result<f64> {
                vals.get(k)
                    .ok_or_else(|| Error::parse(origin, format!("vertex {i}: too few values")))?
                    .parse::<f64>()
                    .map_err(|e| Error::parse(origin, format!("vertex {i}: {e}")))
            };
            points.push(Point3::new(get(ix)?, get(iy)?, get(iz)?));
        }
    }
    Ok(points)
}

pub fn read_ply(path: &Path) -> Result<Vec<Point3<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

pub fn to_ply_string(points: &[Point3<f64>]) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_vertices_and_skips_other_elements() {
        let text = "ply
format ascii 1.0
comment from a scanner
element camera 1
property float k
element vertex 2
property float nx
property float x
property float y
property float z
element face 1
property list uchar int vertex_indices
end_header
9
0.0 1 2 3
1.0 4 5 6.5
3 0 1 1
";
        let pts = parse_ply(text, Path::new("mem.ply")).unwrap();
        assert_eq!(pts, vec![Point3::new(1.0, 2.0, 3.0), Point3::new(4.0, 5.0, 6.5)]);
    }

    #[test]
    fn round_trip() {
        let pts = vec![Point3::new(0.1, -2.0, 3.25), Point3::new(1e-3, 0.0, 7.0)];
        assert_eq!(parse_ply(&to_ply_string(&pts), Path::new("x")).unwrap(), pts);
    }

    #[test]
    fn binary_is_rejected() {
        let text = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(parse_ply(text, Path::new("x")).is_err());
    }
}
