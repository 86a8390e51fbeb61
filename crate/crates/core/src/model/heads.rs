use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, Parameter, Var};

use super::config::HeadKind;
use super::layers::{Linear, Norm};
use super::net::Memory;

#[derive(Debug, Clone)]
pub enum HeadBody {
    /// One-head cross-attention from the hidden row over the condition.
    Cross { q: Linear, k: Linear, v: Linear, o: Linear },
    /// Two-layer GELU network on the hidden row alone.
    Mlp { fc1: Linear, fc2: Linear },
}

/// Draft head `d`: reads the hidden state at position `s` and predicts
/// the token at `s + d + 1`.
#[derive(Debug, Clone)]
pub struct DraftHead {
    pub index: usize,
    pub body: HeadBody,
    pub norm: Norm,
    pub out: Linear,
}

impl DraftHead {
    pub fn new<R: Rng>(rng: &mut R, kind: HeadKind, index: usize, width: usize, vocab: usize) -> Self {
        let p = format!("heads.{index}");
        let body = match kind {
            HeadKind::CrossAttention => HeadBody::Cross {
                q: Linear::new(rng, &format!("{p}.q"), width, width, 1.0),
                k: Linear::new(rng, &format!("{p}.k"), width, width, 1.0),
                v: Linear::new(rng, &format!("{p}.v"), width, width, 1.0),
                o: Linear::new(rng, &format!("{p}.o"), width, width, 1.0),
            },
            HeadKind::Mlp => HeadBody::Mlp {
                fc1: Linear::new(rng, &format!("{p}.fc1"), width, 4 * width, 1.0),
                fc2: Linear::new(rng, &format!("{p}.fc2"), 4 * width, width, 1.0),
            },
        };
        DraftHead {
            index,
            body,
            norm: Norm::new(&format!("{p}.norm"), width),
            out: Linear::new(rng, &format!("{p}.out"), width, vocab, 0.5),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self.body {
            HeadBody::Cross { .. } => HeadKind::CrossAttention,
            HeadBody::Mlp { .. } => HeadKind::Mlp,
        }
    }

    /// Logits for every hidden row.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, hidden: Var, memory: Memory<'a>) -> Result<Var> {
        let delta = match &self.body {
            HeadBody::Cross { q, k, v, o } => {
                let qv = q.forward(g, hidden)?;
                let (kv, vv) = match memory {
                    Memory::Var(m) => (k.forward(g, m)?, v.forward(g, m)?),
                    Memory::Prepared(p) => {
                        let (pk, pv) = &p.heads[self.index - 1];
                        (g.constant(pk), g.constant(pv))
                    }
                };
                let a = g.attention(qv, kv, vv, 1, false, None)?;
                o.forward(g, a)?
            }
            HeadBody::Mlp { fc1, fc2 } => {
                let h = fc1.forward(g, hidden)?;
                let h = g.gelu(h)?;
                fc2.forward(g, h)?
            }
        };
        let r = g.add(hidden, delta)?;
        let z = self.norm.forward(g, r)?;
        self.out.forward(g, z)
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v = match &self.body {
            HeadBody::Cross { q, k, v, o } => vec![q, k, v, o],
            HeadBody::Mlp { fc1, fc2 } => vec![fc1, fc2],
        };
        v.push(&self.out);
        v
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.linears().into_iter().flat_map(|l| l.params()).collect();
        v.extend(self.norm.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = match &mut self.body {
            HeadBody::Cross { q, k, v, o } => [q, k, v, o].into_iter().flat_map(|l| l.params_mut()).collect(),
            HeadBody::Mlp { fc1, fc2 } => [fc1, fc2].into_iter().flat_map(|l| l.params_mut()).collect(),
        };
        v.extend(self.out.params_mut());
        v.extend(self.norm.params_mut());
        v
    }
}
