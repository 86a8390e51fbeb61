//! ASCII Wavefront OBJ, `v` and `f` records only.
//!
//! Polygons are fan-triangulated with a warning. Relative (negative) indices
//! are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::mesh::Mesh;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjRead {
    pub mesh: Mesh,
    pub warnings: Vec<String>,
}

pub fn to_obj_string(m: &Mesh) -> Result<String> {
    m.validate()?;
    let mut s = String::new();
    for v in &m.vertices {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for f in &m.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    Ok(s)
}

pub fn obj_write(m: &Mesh, path: &Path) -> Result<()> {
    std::fs::write(path, to_obj_string(m)?).map_err(|e| Error::io(path, e))
}

pub fn obj_read(path: &Path) -> Result<ObjRead> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

pub fn parse_obj(text: &str) -> Result<ObjRead> {
    let mut out = ObjRead::default();
    let mut faces: Vec<(usize, Vec<u32>)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        let mut parts = body.split_whitespace();
        let err = |msg: String| Error::Parse { line, msg };
        match parts.next() {
            None => {}
            Some("v") => {
                let c: Vec<f64> = parts
                    .map(|p| p.parse::<f64>().map_err(|_| err(format!("bad coordinate '{p}'"))))
                    .collect::<Result<_>>()?;
                if c.len() < 3 || c.len() > 4 || c.iter().any(|x| !x.is_finite()) {
                    return Err(err(format!("vertex needs 3 finite coordinates: '{body}'")));
                }
                out.mesh.vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for p in parts {
                    let head = p.split('/').next().unwrap_or("");
                    let i: i64 = head
                        .parse()
                        .map_err(|_| err(format!("bad face index '{p}'")))?;
                    if i <= 0 {
                        return Err(err(format!("unsupported face index {i}")));
                    }
                    idx.push((i - 1) as u32);
                }
                if idx.len() < 3 {
                    return Err(err("face with fewer than 3 vertices".into()));
                }
                faces.push((line, idx));
            }
            Some("vn" | "vt" | "o" | "g" | "s" | "usemtl" | "mtllib") => {}
            Some(tag) => return Err(err(format!("unsupported record '{tag}'"))),
        }
    }
    let nv = out.mesh.vertices.len() as u32;
    for (line, idx) in faces {
        if let Some(&bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(Error::Parse {
                line,
                msg: format!("face index {} beyond {nv} vertices", bad + 1),
            });
        }
        if idx.len() > 3 {
            out.warnings.push(format!(
                "line {line}: {}-gon fan-triangulated",
                idx.len()
            ));
        }
        for k in 1..idx.len() - 1 {
            out.mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::synth::box_mesh;

    #[test]
    fn roundtrip_box() {
        let m = box_mesh([0.3, 0.712345678, 1.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("box.obj");
        obj_write(&m, &p).unwrap();
        let r = obj_read(&p).unwrap();
        assert_eq!(r.mesh.faces, m.faces);
        for (a, b) in r.mesh.vertices.iter().zip(&m.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-6);
            }
        }
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn quad_is_fanned() {
        let r = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        assert_eq!(r.mesh.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }));
        let e = parse_obj("v 0 0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_obj("v 0 0 0\n\nf 1 2 9\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
        assert!(parse_obj("v 1 2 x\n").is_err());
    }

    #[test]
    fn slashes_and_comments() {
        let r = parse_obj("# c\nv 0 0 0\nv 1 0 0\nv 0 1 0 # tail\nvn 0 0 1\nf 1//1 2//1 3//1\n").unwrap();
        assert_eq!(r.mesh.faces, vec![[0, 1, 2]]);
    }
}
