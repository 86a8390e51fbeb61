use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mesh::{Mesh, Vec3};

pub const DEFAULT_BINS: u32 = 128;
pub const MERGE_TOLERANCE: f64 = 1e-6;

/// Coordinate bins followed by SOS, EOS and PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub bins: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary { bins: DEFAULT_BINS }
    }
}

impl Vocabulary {
    pub fn new(bins: u32) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
        }
        Ok(Vocabulary { bins })
    }
    pub fn sos(&self) -> u32 {
        self.bins
    }
    pub fn eos(&self) -> u32 {
        self.bins + 1
    }
    pub fn pad(&self) -> u32 {
        self.bins + 2
    }
    pub fn size(&self) -> usize {
        self.bins as usize + 3
    }
    pub fn is_coord(&self, t: u32) -> bool {
        t < self.bins
    }

    pub fn quantize(&self, c: f64) -> u32 {
        let b = ((c + 1.0) / 2.0 * self.bins as f64).floor();
        b.clamp(0.0, (self.bins - 1) as f64) as u32
    }

    pub fn dequantize(&self, b: u32) -> f64 {
        (b as f64 + 0.5) * 2.0 / self.bins as f64 - 1.0
    }

    /// Largest face count whose framed sequence fits in `max_len` tokens.
    pub fn max_faces(&self, max_len: usize) -> usize {
        max_len.saturating_sub(2) / 9
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks SOS prefix, 9-token body groups before EOS and coordinate-only body.
    pub fn check(&self, v: &Vocabulary) -> Result<()> {
        if self.tokens.first() != Some(&v.sos()) {
            return Err(Error::InvalidToken {
                token: self.tokens.first().copied().unwrap_or(u32::MAX),
                position: 0,
            });
        }
        let body_end = self
            .tokens
            .iter()
            .position(|&t| t == v.eos())
            .unwrap_or(self.tokens.len());
        for (i, &t) in self.tokens[1..body_end].iter().enumerate() {
            if !v.is_coord(t) {
                return Err(Error::InvalidToken { token: t, position: i + 1 });
            }
        }
        if (body_end - 1) % 9 != 0 {
            return Err(Error::Length(format!(
                "body of {} tokens is not a whole number of triangles",
                body_end - 1
            )));
        }
        Ok(())
    }
}

/// Serializes a canonical, normalized mesh; fails if the framed sequence would exceed `max_len`.
pub fn tokenize(m: &Mesh, v: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let limit = v.max_faces(max_len);
    if m.faces.len() > limit {
        return Err(Error::SequenceTooLong {
            len: 9 * m.faces.len() + 2,
            limit: max_len,
        });
    }
    m.validate()?;
    let mut tokens = Vec::with_capacity(9 * m.faces.len() + 2);
    tokens.push(v.sos());
    for f in &m.faces {
        for &i in f {
            let p = m.vertices[i as usize];
            tokens.extend(p.iter().map(|&c| v.quantize(c)));
        }
    }
    tokens.push(v.eos());
    Ok(TokenSequence { tokens })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Detokenized {
    pub mesh: Mesh,
    pub warnings: Vec<String>,
    /// Trailing body tokens that did not form a full triangle.
    pub dropped_tokens: usize,
    /// Whether an EOS was found.
    pub terminated: bool,
}

/// Rebuilds a mesh from coordinate tokens.
///
/// A leading SOS is optional. Reading stops at EOS; a trailing partial
/// triangle is dropped with a warning. Vertices closer than
/// [`MERGE_TOLERANCE`] are merged and faces that collapse are removed.
pub fn detokenize(tokens: &[u32], v: &Vocabulary) -> Result<Detokenized> {
    let start = usize::from(tokens.first() == Some(&v.sos()));
    let mut body = Vec::new();
    let mut terminated = false;
    for (i, &t) in tokens.iter().enumerate().skip(start) {
        if t == v.eos() {
            terminated = true;
            break;
        }
        if !v.is_coord(t) {
            return Err(Error::InvalidToken { token: t, position: i });
        }
        body.push(t);
    }
    let mut out = Detokenized {
        terminated,
        ..Default::default()
    };
    let full = body.len() / 9 * 9;
    out.dropped_tokens = body.len() - full;
    if out.dropped_tokens > 0 {
        out.warnings.push(format!(
            "dropped {} trailing tokens of an incomplete triangle",
            out.dropped_tokens
        ));
    }
    let mut index: HashMap<[i64; 3], u32> = HashMap::new();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut degenerate = 0usize;
    for tri in body[..full].chunks_exact(9) {
        let mut f = [0u32; 3];
        for (k, c) in tri.chunks_exact(3).enumerate() {
            let p = [v.dequantize(c[0]), v.dequantize(c[1]), v.dequantize(c[2])];
            let key = p.map(|x| (x / MERGE_TOLERANCE).round() as i64);
            f[k] = *index.entry(key).or_insert_with(|| {
                vertices.push(p);
                (vertices.len() - 1) as u32
            });
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            degenerate += 1;
        } else {
            out.mesh.faces.push(f);
        }
    }
    if degenerate > 0 {
        out.warnings
            .push(format!("removed {degenerate} triangles collapsed by vertex merging"));
    }
    out.mesh.vertices = vertices;
    Ok(out)
}
