use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::mesh::{Mesh, Vec3};

pub const METRIC_POINTS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Source face of each point.
    pub faces: Vec<usize>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        PointCloud {
            faces: vec![usize::MAX; points.len()],
            points,
        }
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A surface location as a face index and barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub face: usize,
    pub bary: [f64; 3],
}

impl SurfaceSample {
    pub fn eval(&self, tri: [Vec3; 3]) -> Vec3 {
        let [wa, wb, wc] = self.bary;
        let [a, b, c] = tri;
        [
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]
    }
}

/// Area-weighted face choice followed by uniform barycentric weights.
pub fn sample_surface(m: &Mesh, n: usize, seed: u64) -> Result<Vec<SurfaceSample>> {
    if m.is_empty() {
        return Err(Error::Degenerate("cannot sample an empty mesh".into()));
    }
    m.validate()?;
    let mut cum = Vec::with_capacity(m.faces.len());
    let mut total = 0.0;
    for f in 0..m.faces.len() {
        total += m.face_area(f);
        cum.push(total);
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate("mesh has zero surface area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let face = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
            let r1 = rng.gen::<f64>().sqrt();
            let r2 = rng.gen::<f64>();
            SurfaceSample {
                face,
                bary: [1.0 - r1, r1 * (1.0 - r2), r1 * r2],
            }
        })
        .collect())
}

pub fn sample_points(m: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    let samples = sample_surface(m, n, seed)?;
    Ok(PointCloud {
        points: samples
            .iter()
            .map(|s| s.eval(m.faces[s.face].map(|i| m.vertices[i as usize])))
            .collect(),
        faces: samples.iter().map(|s| s.face).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangles() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 1.0], [6.0, 5.0, 1.0], [5.0, 6.0, 1.0]],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap()
    }

    #[test]
    fn inside_single_triangle() {
        let m = Mesh::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 3.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let pc = sample_points(&m, 500, 3).unwrap();
        for p in &pc.points {
            let (l1, l2) = (p[0] / 2.0, p[1] / 3.0);
            assert!(l1 >= 0.0 && l2 >= 0.0 && l1 + l2 <= 1.0 + 1e-12 && p[2] == 0.0);
        }
    }

    #[test]
    fn equal_areas_split_evenly() {
        let pc = sample_points(&two_triangles(), 10_000, 11).unwrap();
        let first = pc.faces.iter().filter(|&&f| f == 0).count() as f64;
        // binomial(10000, 0.5): sigma = 50
        assert!((first - 5000.0).abs() <= 150.0, "{first}");
    }

    #[test]
    fn deterministic() {
        let m = two_triangles();
        assert_eq!(sample_points(&m, 64, 5).unwrap(), sample_points(&m, 64, 5).unwrap());
        assert_ne!(sample_points(&m, 64, 5).unwrap(), sample_points(&m, 64, 6).unwrap());
    }

    #[test]
    fn zero_area() {
        let m = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert!(matches!(sample_points(&m, 4, 0), Err(Error::Degenerate(_))));
        assert!(sample_points(&Mesh::default(), 4, 0).is_err());
    }
}
