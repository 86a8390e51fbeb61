use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{sample_points, tokenize, ManifestRecord, Mesh, PointCloud, Vocabulary};
use crate::par::{self, Parallelism};
use crate::tensor::Tensor;

/// A conditioning cloud with the token sequence trained against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub points: Vec<[f32; 3]>,
    pub tokens: Vec<u32>,
}

impl Example {
    pub fn cloud(&self) -> PointCloud {
        PointCloud::from_points(self.points.iter().map(|p| p.map(f64::from)).collect())
    }

    pub fn points_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            vec![self.points.len(), 3],
            self.points.iter().flatten().copied().collect(),
        )
    }
}

/// Seed of the conditioning cloud drawn for shape `id`.
pub fn condition_seed(base: u64, id: usize) -> u64 {
    crate::mesh::corpus::shape_seed(base ^ 0x636f_6e64, id)
}

pub fn cloud_points(pc: &PointCloud) -> Vec<[f32; 3]> {
    pc.points.iter().map(|p| p.map(|c| c as f32)).collect()
}

/// Tokenized examples; shapes that do not fit `max_len` are skipped and counted.
pub fn build_examples(
    shapes: &[(ManifestRecord, Mesh)],
    vocab: &Vocabulary,
    max_len: usize,
    cond_points: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<(Vec<Example>, usize)> {
    let built = par::map(shapes, mode, |_, (rec, mesh)| -> Result<Option<Example>> {
        let tokens = match tokenize(mesh, vocab, max_len) {
            Ok(t) => t.tokens,
            Err(Error::SequenceTooLong { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let pc = sample_points(mesh, cond_points, condition_seed(seed, rec.id))?;
        Ok(Some(Example {
            id: rec.id,
            points: cloud_points(&pc),
            tokens,
        }))
    });
    let mut out = Vec::with_capacity(built.len());
    let mut skipped = 0;
    for b in built {
        match b? {
            Some(e) => out.push(e),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        info!("skipped {skipped} sequences longer than {max_len} tokens");
    }
    Ok((out, skipped))
}

pub fn write_examples(examples: &[Example], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_corpus, CorpusSpec};

    #[test]
    fn builds_and_roundtrips() {
        let shapes = generate_corpus(&CorpusSpec::uniform(6, 3), Parallelism::Sequential).unwrap();
        let v = Vocabulary::new(32).unwrap();
        let (ex, skipped) = build_examples(&shapes, &v, 4000, 16, 1, Parallelism::Sequential).unwrap();
        assert_eq!(ex.len() + skipped, 6);
        assert!(ex.iter().all(|e| e.points.len() == 16 && e.tokens[0] == v.sos()));
        let (short, skipped) = build_examples(&shapes, &v, 110, 16, 1, Parallelism::Sequential).unwrap();
        assert!(skipped > 0 && short.iter().all(|e| e.tokens.len() <= 110));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ex.jsonl");
        write_examples(&ex, &p).unwrap();
        assert_eq!(read_examples(&p).unwrap(), ex);
    }
}
