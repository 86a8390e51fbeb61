//! Procedural shape families for the training corpus.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mesh::{Mesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Box,
    Frustum,
    Prism,
    LowpolySphere,
    Extrusion,
    Composite,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Box,
        Family::Frustum,
        Family::Prism,
        Family::LowpolySphere,
        Family::Extrusion,
        Family::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Box => "box",
            Family::Frustum => "frustum",
            Family::Prism => "prism",
            Family::LowpolySphere => "lowpoly-sphere",
            Family::Extrusion => "extrusion",
            Family::Composite => "composite",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape family '{s}'")))
    }
}

/// Axis-aligned box centred at the origin; 8 vertices, 12 outward triangles.
pub fn box_mesh(size: Vec3) -> Mesh {
    let [hx, hy, hz] = size.map(|s| 0.5 * s);
    let mut vertices = Vec::with_capacity(8);
    for i in 0..8 {
        vertices.push([
            if i & 1 == 0 { -hx } else { hx },
            if i & 2 == 0 { -hy } else { hy },
            if i & 4 == 0 { -hz } else { hz },
        ]);
    }
    let faces = vec![
        [0, 2, 3], [0, 3, 1], // z-
        [4, 5, 7], [4, 7, 6], // z+
        [0, 1, 5], [0, 5, 4], // y-
        [2, 6, 7], [2, 7, 3], // y+
        [0, 4, 6], [0, 6, 2], // x-
        [1, 3, 7], [1, 7, 5], // x+
    ];
    Mesh { vertices, faces }
}

/// k-gon frustum along z: `2k` vertices and `4k − 4` triangles
/// (`2k` side triangles, each cap fan-triangulated into `k − 2`).
pub fn frustum(k: usize, r_bottom: f64, r_top: f64, height: f64, phase: f64) -> Mesh {
    assert!(k >= 3, "frustum needs at least 3 sides");
    let ring = |r: f64, z: f64| -> Vec<Vec3> {
        (0..k)
            .map(|i| {
                let t = phase + TAU * i as f64 / k as f64;
                [r * t.cos(), r * t.sin(), z]
            })
            .collect()
    };
    let mut vertices = ring(r_bottom, -0.5 * height);
    vertices.extend(ring(r_top, 0.5 * height));
    let k32 = k as u32;
    let mut faces = Vec::with_capacity(4 * k - 4);
    for i in 0..k32 {
        let j = (i + 1) % k32;
        faces.push([i, j, k32 + j]);
        faces.push([i, k32 + j, k32 + i]);
    }
    for i in 1..k32 - 1 {
        faces.push([0, i + 1, i]);
        faces.push([k32, k32 + i, k32 + i + 1]);
    }
    Mesh { vertices, faces }
}

pub fn prism(k: usize, radius: f64, height: f64, phase: f64) -> Mesh {
    frustum(k, radius, radius, height, phase)
}

/// UV sphere with `slices` meridians and `stacks` bands:
/// `slices·(stacks−1) + 2` vertices, `2·slices·(stacks−1)` triangles.
pub fn lowpoly_sphere(slices: usize, stacks: usize, radii: Vec3) -> Mesh {
    assert!(slices >= 3 && stacks >= 2);
    let mut vertices = vec![[0.0, 0.0, -radii[2]]];
    for s in 1..stacks {
        let phi = std::f64::consts::PI * s as f64 / stacks as f64;
        for i in 0..slices {
            let t = TAU * i as f64 / slices as f64;
            vertices.push([
                radii[0] * phi.sin() * t.cos(),
                radii[1] * phi.sin() * t.sin(),
                -radii[2] * phi.cos(),
            ]);
        }
    }
    vertices.push([0.0, 0.0, radii[2]]);
    let top = (vertices.len() - 1) as u32;
    let sl = slices as u32;
    let ring = |s: u32, i: u32| 1 + s * sl + (i % sl);
    let mut faces = Vec::new();
    for i in 0..sl {
        faces.push([0, ring(0, i + 1), ring(0, i)]);
    }
    for s in 0..(stacks as u32 - 2) {
        for i in 0..sl {
            faces.push([ring(s, i), ring(s, i + 1), ring(s + 1, i + 1)]);
            faces.push([ring(s, i), ring(s + 1, i + 1), ring(s + 1, i)]);
        }
    }
    let last = stacks as u32 - 2;
    for i in 0..sl {
        faces.push([top, ring(last, i), ring(last, i + 1)]);
    }
    Mesh { vertices, faces }
}

/// Star-shaped polygon extruded along z, caps fanned from a centre vertex:
/// `2k + 2` vertices, `4k` triangles.
pub fn extrusion(radii: &[f64], height: f64) -> Mesh {
    let k = radii.len();
    assert!(k >= 3);
    let mut vertices = Vec::with_capacity(2 * k + 2);
    for &z in &[-0.5 * height, 0.5 * height] {
        for (i, &r) in radii.iter().enumerate() {
            let t = TAU * i as f64 / k as f64;
            vertices.push([r * t.cos(), r * t.sin(), z]);
        }
    }
    vertices.push([0.0, 0.0, -0.5 * height]);
    vertices.push([0.0, 0.0, 0.5 * height]);
    let k32 = k as u32;
    let (cb, ct) = (2 * k32, 2 * k32 + 1);
    let mut faces = Vec::with_capacity(4 * k);
    for i in 0..k32 {
        let j = (i + 1) % k32;
        faces.push([i, j, k32 + j]);
        faces.push([i, k32 + j, k32 + i]);
        faces.push([cb, j, i]);
        faces.push([ct, k32 + i, k32 + j]);
    }
    Mesh { vertices, faces }
}

fn random_primitive(rng: &mut ChaCha8Rng, family: Family) -> Mesh {
    match family {
        Family::Box => box_mesh([
            rng.gen_range(0.3..1.0),
            rng.gen_range(0.3..1.0),
            rng.gen_range(0.3..1.0),
        ]),
        Family::Frustum => {
            let k = rng.gen_range(4..=8);
            let rb = rng.gen_range(0.3..0.6);
            let rt = rng.gen_range(0.1..0.5);
            frustum(k, rb, rt, rng.gen_range(0.3..1.0), rng.gen_range(0.0..TAU / k as f64))
        }
        Family::Prism => {
            let k = rng.gen_range(4..=8);
            prism(k, rng.gen_range(0.2..0.6), rng.gen_range(0.3..1.0), rng.gen_range(0.0..TAU / k as f64))
        }
        Family::LowpolySphere => lowpoly_sphere(
            rng.gen_range(4..=8),
            rng.gen_range(3..=5),
            [rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6)],
        ),
        Family::Extrusion => {
            let k = rng.gen_range(4..=10);
            let radii: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..0.6)).collect();
            extrusion(&radii, rng.gen_range(0.2..0.8))
        }
        Family::Composite => {
            let parts = rng.gen_range(2..=4);
            let mut m = Mesh::default();
            for _ in 0..parts {
                let fam = [Family::Box, Family::Prism, Family::Frustum, Family::LowpolySphere]
                    [rng.gen_range(0..4)];
                let p = random_primitive(rng, fam);
                let s = rng.gen_range(0.4..0.9);
                let off = [
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.6..0.6),
                ];
                m.append(&p.transformed([s; 3], off));
            }
            m
        }
    }
}

/// Deterministic shape for `(seed, family)`; 12 to 400 triangles.
pub fn gen_synthetic_mesh(seed: u64, family: Family) -> Mesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ family.tag());
    random_primitive(&mut rng, family)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outward(m: &Mesh) -> bool {
        // Signed volume of a closed, outward-wound mesh is positive.
        let vol: f64 = m
            .faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| m.vertices[i as usize]);
                a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                    + a[2] * (b[0] * c[1] - b[1] * c[0])
            })
            .sum();
        vol > 0.0
    }

    #[test]
    fn box_topology() {
        let m = gen_synthetic_mesh(1, Family::Box);
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.faces.len(), 12);
        assert!(outward(&m));
    }

    #[test]
    fn hexagonal_prism_counts() {
        let m = prism(6, 0.5, 1.0, 0.0);
        assert_eq!(m.vertices.len(), 12);
        // 12 side triangles + 2 caps of 4
        assert_eq!(m.faces.len(), 20);
        assert!(outward(&m));
    }

    #[test]
    fn other_primitives_are_closed_and_outward() {
        assert!(outward(&frustum(5, 0.5, 0.2, 1.0, 0.3)));
        let s = lowpoly_sphere(6, 4, [0.5, 0.4, 0.3]);
        assert_eq!(s.vertices.len(), 6 * 3 + 2);
        assert_eq!(s.faces.len(), 2 * 6 * 3);
        assert!(outward(&s));
        let e = extrusion(&[0.3, 0.5, 0.2, 0.4, 0.6], 0.5);
        assert_eq!(e.faces.len(), 20);
        assert!(outward(&e));
    }

    #[test]
    fn deterministic_and_in_range() {
        for fam in Family::ALL {
            for seed in 0..40 {
                let a = gen_synthetic_mesh(seed, fam);
                let b = gen_synthetic_mesh(seed, fam);
                assert_eq!(a, b);
                assert!((12..=400).contains(&a.faces.len()), "{fam} {}", a.faces.len());
                a.validate().unwrap();
            }
        }
    }

    #[test]
    fn family_names_roundtrip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("torus".parse::<Family>().is_err());
    }
}
