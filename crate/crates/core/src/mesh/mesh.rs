use std::collections::HashMap;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Triangle mesh.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let m = Mesh { vertices, faces };
        m.validate()?;
        Ok(m)
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::Index(format!(
                    "face {i} {f:?} references vertex beyond {n}"
                )));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds as (min, max).
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Appends another mesh, offsetting its indices.
    pub fn append(&mut self, other: &Mesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
    }

    pub fn transformed(&self, scale: Vec3, offset: Vec3) -> Mesh {
        Mesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| {
                    [
                        v[0] * scale[0] + offset[0],
                        v[1] * scale[1] + offset[1],
                        v[2] * scale[2] + offset[2],
                    ]
                })
                .collect(),
            faces: self.faces.clone(),
        }
    }
}

/// Centers on the bounding-box center and scales the longest axis to [-1, 1].
pub fn normalize_mesh(m: &Mesh) -> Result<Mesh> {
    let (lo, hi) = m
        .bounds()
        .ok_or_else(|| Error::Degenerate("cannot normalize an empty mesh".into()))?;
    let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let longest = ext[0].max(ext[1]).max(ext[2]);
    if !(longest > 0.0) || !longest.is_finite() {
        return Err(Error::Degenerate("mesh has zero extent".into()));
    }
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let s = 2.0 / longest;
    let vertices = m
        .vertices
        .iter()
        .map(|v| {
            let mut out = [0.0; 3];
            for a in 0..3 {
                out[a] = ((v[a] - center[a]) * s).clamp(-1.0, 1.0);
            }
            out
        })
        .collect();
    Ok(Mesh {
        vertices,
        faces: m.faces.clone(),
    })
}

fn zyx_key(v: &Vec3) -> [u64; 3] {
    // Total order on finite floats, compared as (z, y, x).
    let k = |x: f64| {
        let b = x.to_bits();
        if b >> 63 == 1 {
            !b
        } else {
            b | (1 << 63)
        }
    };
    [k(v[2]), k(v[1]), k(v[0])]
}

/// Deterministic serialization order.
///
/// Vertices are sorted by (z, y, x) with exact duplicates merged; each face is
/// rotated so its lowest index comes first (winding preserved); faces are
/// sorted by index triple. Faces that collapse onto a repeated vertex are
/// dropped.
pub fn canonical_order(m: &Mesh) -> Mesh {
    let mut order: Vec<usize> = (0..m.vertices.len()).collect();
    order.sort_by_key(|&i| zyx_key(&m.vertices[i]));
    let mut remap = vec![0u32; m.vertices.len()];
    let mut vertices: Vec<Vec3> = Vec::with_capacity(m.vertices.len());
    let mut seen: HashMap<[u64; 3], u32> = HashMap::new();
    for &i in &order {
        let key = zyx_key(&m.vertices[i]);
        let idx = *seen.entry(key).or_insert_with(|| {
            vertices.push(m.vertices[i]);
            (vertices.len() - 1) as u32
        });
        remap[i] = idx;
    }
    let mut faces: Vec<[u32; 3]> = m
        .faces
        .iter()
        .map(|f| f.map(|i| remap[i as usize]))
        .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
        .map(rotate_lowest_first)
        .collect();
    faces.sort_unstable();
    Mesh { vertices, faces }
}

pub(crate) fn rotate_lowest_first(f: [u32; 3]) -> [u32; 3] {
    let k = (0..3).min_by_key(|&i| f[i]).unwrap_or(0);
    [f[k], f[(k + 1) % 3], f[(k + 2) % 3]]
}
