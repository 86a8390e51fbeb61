//! Nearest-neighbour distances, Chamfer and Hausdorff.
//!
//! Chamfer is `mean_a min_b |a−b| + mean_b min_a |a−b|` with Euclidean
//! (not squared) distances.

use crate::error::{Error, Result};

use super::mesh::Vec3;
use super::sample::PointCloud;

fn dist_sq(a: &Vec3, b: &Vec3) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Uniform bucket grid over a point set.
pub struct Grid<'a> {
    points: &'a [Vec3],
    lo: Vec3,
    cell: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Grid<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext = [0, 1, 2].map(|a| (hi[a] - lo[a]).max(0.0));
        let longest = ext[0].max(ext[1]).max(ext[2]);
        let target = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = if longest > 0.0 { longest / target } else { 1.0 };
        let dims = ext.map(|e| ((e / cell).floor() as usize + 1).min(target as usize + 1));
        let mut grid = Grid {
            points,
            lo,
            cell,
            dims,
            start: Vec::new(),
            order: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.coord(p))).collect();
        let mut count = vec![0usize; ncells + 1];
        for &k in &keys {
            count[k + 1] += 1;
        }
        for i in 0..ncells {
            count[i + 1] += count[i];
        }
        let mut fill = count.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.start = count;
        grid.order = order;
        grid
    }

    fn coord(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.lo[a]) / self.cell).floor();
            if c.is_nan() || c < 0.0 {
                0
            } else {
                (c as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn scan_cell(&self, c: [usize; 3], q: &Vec3, best: &mut f64) {
        let k = self.flat(c);
        for &i in &self.order[self.start[k]..self.start[k + 1]] {
            let d = dist_sq(q, &self.points[i]);
            if d < *best {
                *best = d;
            }
        }
    }

    /// Squared distance from `q` to its nearest point; identical to a linear scan.
    pub fn nearest_sq(&self, q: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        if self.points.is_empty() {
            return best;
        }
        let c = self.coord(q).map(|x| x as isize);
        let max_r = self.dims.iter().copied().max().unwrap_or(1) as isize;
        for r in 0..=max_r {
            let span = |a: usize| (c[a] - r).max(0)..=(c[a] + r).min(self.dims[a] as isize - 1);
            for z in span(2) {
                for y in span(1) {
                    for x in span(0) {
                        let cheb = (x - c[0]).abs().max((y - c[1]).abs()).max((z - c[2]).abs());
                        if cheb == r {
                            self.scan_cell([x as usize, y as usize, z as usize], q, &mut best);
                        }
                    }
                }
            }
            // Cells beyond ring r are at least r·cell away, less a rounding margin.
            let bound = (r as f64 - 1e-6).max(0.0) * self.cell;
            if best <= bound * bound {
                break;
            }
        }
        best
    }
}

/// Nearest-neighbour Euclidean distance from every point of `from` into `to`.
pub fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    let g = Grid::new(to);
    from.iter().map(|q| g.nearest_sq(q).sqrt()).collect()
}

/// Quadratic reference scan.
pub fn nearest_distances_brute(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    from.iter()
        .map(|q| {
            to.iter()
                .map(|p| dist_sq(q, p))
                .fold(f64::INFINITY, |a, b| if b < a { b } else { a })
                .sqrt()
        })
        .collect()
}

fn check_nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Degenerate("distance on an empty point cloud".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_nonempty(a, b)?;
    Ok(mean(&nearest_distances(&a.points, &b.points)) + mean(&nearest_distances(&b.points, &a.points)))
}

/// Maximum of the two directed Hausdorff distances.
pub fn hausdorff_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let (ab, ba) = directed_hausdorff(a, b)?;
    Ok(ab.max(ba))
}

pub fn directed_hausdorff(a: &PointCloud, b: &PointCloud) -> Result<(f64, f64)> {
    check_nonempty(a, b)?;
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok((
        max(nearest_distances(&a.points, &b.points)),
        max(nearest_distances(&b.points, &a.points)),
    ))
}
