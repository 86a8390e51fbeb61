//! Seeded synthetic corpus with a JSONL manifest.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Parallelism};

use super::mesh::{canonical_order, normalize_mesh, Mesh};
use super::synth::{gen_synthetic_mesh, Family};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub family: Family,
    pub seed: u64,
    pub faces: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub count: usize,
    pub seed: u64,
    /// Relative weights per family.
    pub mix: Vec<(Family, f64)>,
}

impl CorpusSpec {
    pub fn uniform(count: usize, seed: u64) -> Self {
        CorpusSpec {
            count,
            seed,
            mix: Family::ALL.iter().map(|&f| (f, 1.0)).collect(),
        }
    }

    /// Per-family counts by largest remainder, so totals match exactly.
    pub fn family_counts(&self) -> Result<Vec<(Family, usize)>> {
        let total: f64 = self.mix.iter().map(|m| m.1).sum();
        if self.mix.is_empty() || !(total > 0.0) || self.mix.iter().any(|m| m.1 < 0.0 || !m.1.is_finite()) {
            return Err(Error::Config("family mix needs non-negative weights with a positive sum".into()));
        }
        let exact: Vec<f64> = self.mix.iter().map(|m| m.1 / total * self.count as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rest = self.count - counts.iter().sum::<usize>();
        let mut by_rem: Vec<usize> = (0..exact.len()).collect();
        by_rem.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in &by_rem {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        Ok(self.mix.iter().map(|m| m.0).zip(counts).collect())
    }
}

/// Normalized, canonically ordered mesh for a record.
pub fn build_shape(family: Family, seed: u64) -> Result<Mesh> {
    Ok(canonical_order(&normalize_mesh(&gen_synthetic_mesh(seed, family))?))
}

pub fn shape_seed(base: u64, id: usize) -> u64 {
    let mut z = base ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the corpus manifest and shapes.
pub fn generate_corpus(spec: &CorpusSpec, mode: Parallelism) -> Result<Vec<(ManifestRecord, Mesh)>> {
    let mut families: Vec<Family> = Vec::with_capacity(spec.count);
    for (f, n) in spec.family_counts()? {
        families.extend(std::iter::repeat(f).take(n));
    }
    families.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let jobs: Vec<(usize, Family)> = families.into_iter().enumerate().collect();
    par::map(&jobs, mode, |_, &(id, family)| {
        let seed = shape_seed(spec.seed, id);
        let mesh = build_shape(family, seed)?;
        Ok((
            ManifestRecord {
                id,
                family,
                seed,
                faces: mesh.faces.len(),
            },
            mesh,
        ))
    })
    .into_iter()
    .collect()
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
