use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::PointCloud;
use crate::tensor::{checkpoint, softmax_rows, Graph, Module, Parameter, Tensor, Var};

use super::cache::KvCache;
use super::config::{HeadKind, LoraTargets, ModelConfig};
use super::heads::DraftHead;
use super::layers::{normal_tensor, Linear, Norm};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "model.cfg";

/// Position whose token is predicted from the hidden state at `hidden_pos`.
/// Head 0 is the backbone output projection; draft head `d` looks `d + 1` ahead.
pub fn predicted_position(hidden_pos: usize, head: usize) -> usize {
    hidden_pos + head + 1
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("heads.")
}

pub fn is_lora_param(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Encoded conditioning points, one memory row each.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub memory: Tensor,
}

/// Condition keys and values projected once for every cross-attention.
#[derive(Debug, Clone)]
pub struct PreparedCondition {
    pub memory: Tensor,
    pub(crate) blocks: Vec<(Tensor, Tensor)>,
    pub(crate) heads: Vec<(Tensor, Tensor)>,
}

/// Where cross-attention reads the condition from.
#[derive(Clone, Copy)]
pub enum Memory<'a> {
    /// Memory rows as a graph value; projections are recorded.
    Var(Var),
    Prepared(&'a PreparedCondition),
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub cq: Linear,
    pub ck: Linear,
    pub cv: Linear,
    pub co: Linear,
    pub ln3: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn new(rng: &mut ChaCha8Rng, i: usize, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let p = |s: &str| format!("blocks.{i}.{s}");
        Block {
            ln1: Norm::new(&p("ln1"), d),
            q: Linear::new(rng, &p("attn.q"), d, d, 1.0),
            k: Linear::new(rng, &p("attn.k"), d, d, 1.0),
            v: Linear::new(rng, &p("attn.v"), d, d, 1.0),
            o: Linear::new(rng, &p("attn.o"), d, d, 1.0),
            ln2: Norm::new(&p("ln2"), d),
            cq: Linear::new(rng, &p("cross.q"), d, d, 1.0),
            ck: Linear::new(rng, &p("cross.k"), d, d, 1.0),
            cv: Linear::new(rng, &p("cross.v"), d, d, 1.0),
            co: Linear::new(rng, &p("cross.o"), d, d, 1.0),
            ln3: Norm::new(&p("ln3"), d),
            fc1: Linear::new(rng, &p("ffn.fc1"), d, cfg.ffn, 1.0),
            fc2: Linear::new(rng, &p("ffn.fc2"), cfg.ffn, d, 1.0),
        }
    }

    fn linears_mut(&mut self) -> [&mut Linear; 10] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.cq,
            &mut self.ck,
            &mut self.cv,
            &mut self.co,
            &mut self.fc1,
            &mut self.fc2,
        ]
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.ln1.params();
        for l in [&self.q, &self.k, &self.v, &self.o] {
            v.extend(l.params());
        }
        v.extend(self.ln2.params());
        for l in [&self.cq, &self.ck, &self.cv, &self.co] {
            v.extend(l.params());
        }
        v.extend(self.ln3.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.ln1.params_mut();
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.o] {
            v.extend(l.params_mut());
        }
        v.extend(self.ln2.params_mut());
        for l in [&mut self.cq, &mut self.ck, &mut self.cv, &mut self.co] {
            v.extend(l.params_mut());
        }
        v.extend(self.ln3.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Backbone outputs for one window.
#[derive(Debug, Clone)]
pub struct WindowOut {
    /// Next-token distributions, one row per window position.
    pub probs: Tensor,
    /// Final hidden states, one row per window position.
    pub hidden: Tensor,
}

/// Graph values of a backbone pass.
pub struct Trunk {
    pub hidden: Var,
    pub logits: Var,
    pub fresh_kv: Vec<(Var, Var)>,
}

/// Conditional decoder-only transformer with draft heads.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub tok_embed: Parameter,
    pub pos_embed: Parameter,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub lm_head: Linear,
    pub heads: Vec<DraftHead>,
}

impl Model {
    /// Scaled-normal matrices, zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let v = cfg.vocab();
        let encoder = Encoder {
            fc1: Linear::new(&mut rng, "cond.fc1", 3, d, 1.0),
            fc2: Linear::new(&mut rng, "cond.fc2", d, d, 1.0),
        };
        let tok_embed = Parameter::new("embed.token", normal_tensor(&mut rng, &[v, d], 0.5));
        let pos_embed = Parameter::new("embed.pos", normal_tensor(&mut rng, &[cfg.max_len, d], 0.1));
        let blocks = (0..cfg.blocks).map(|i| Block::new(&mut rng, i, cfg)).collect();
        let final_norm = Norm::new("final_norm", d);
        let lm_head = Linear::new(&mut rng, "lm_head", d, v, 0.5);
        let mut m = Model {
            cfg: cfg.clone(),
            encoder,
            tok_embed,
            pos_embed,
            blocks,
            final_norm,
            lm_head,
            heads: Vec::new(),
        };
        m.reset_heads(cfg.head_kind, cfg.draft_heads, seed ^ 0x4845_4144)?;
        Ok(m)
    }

    /// Replaces the draft heads with freshly initialized ones.
    pub fn reset_heads(&mut self, kind: HeadKind, count: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.heads = (1..=count)
            .map(|i| DraftHead::new(&mut rng, kind, i, self.cfg.d_model, self.cfg.vocab()))
            .collect();
        self.cfg.head_kind = kind;
        self.cfg.draft_heads = count;
        Ok(())
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.blocks, self.cfg.d_model, self.cfg.max_len)
    }

    fn point_tensor(&self, pc: &PointCloud) -> Result<Tensor> {
        if pc.len() != self.cfg.cond_points {
            return Err(Error::Config(format!(
                "condition needs {} points, got {}",
                self.cfg.cond_points,
                pc.len()
            )));
        }
        let data = pc.points.iter().flat_map(|p| p.map(|c| c as f32)).collect();
        Tensor::new(vec![pc.len(), 3], data)
    }

    /// Per-point MLP; records into `g`.
    pub fn encode_graph<'a>(&'a self, g: &mut Graph<'a>, points: Var) -> Result<Var> {
        let h = self.encoder.fc1.forward(g, points)?;
        let h = g.gelu(h)?;
        self.encoder.fc2.forward(g, h)
    }

    pub fn encode_condition(&self, pc: &PointCloud) -> Result<Condition> {
        let pts = self.point_tensor(pc)?;
        let mut g = Graph::inference();
        let p = g.input(pts);
        let m = self.encode_graph(&mut g, p)?;
        Ok(Condition {
            memory: g.value(m).clone(),
        })
    }

    /// Projects the condition for every block and cross-attention head.
    pub fn prepare(&self, c: &Condition) -> Result<PreparedCondition> {
        let mut g = Graph::inference();
        let m = g.constant(&c.memory);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let k = b.ck.forward(&mut g, m)?;
            let v = b.cv.forward(&mut g, m)?;
            blocks.push((g.value(k).clone(), g.value(v).clone()));
        }
        let mut heads = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            heads.push(match &h.body {
                super::heads::HeadBody::Cross { k, v, .. } => {
                    let kk = k.forward(&mut g, m)?;
                    let vv = v.forward(&mut g, m)?;
                    (g.value(kk).clone(), g.value(vv).clone())
                }
                super::heads::HeadBody::Mlp { .. } => (Tensor::zeros(&[0, 0]), Tensor::zeros(&[0, 0])),
            });
        }
        Ok(PreparedCondition {
            memory: c.memory.clone(),
            blocks,
            heads,
        })
    }

    /// Embeds `tokens` at positions `start..` and runs every block.
    pub fn trunk<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: &[u32],
        start: usize,
        memory: Memory<'a>,
        cache: Option<&'a KvCache>,
    ) -> Result<Trunk> {
        if tokens.is_empty() {
            return Err(Error::Usage("empty token window".into()));
        }
        if start + tokens.len() > self.cfg.max_len {
            return Err(Error::Length(format!(
                "window {}..{} exceeds max_len {}",
                start,
                start + tokens.len(),
                self.cfg.max_len
            )));
        }
        if let Some(c) = cache {
            if c.len() != start {
                return Err(Error::State(format!(
                    "cache holds {} positions, window starts at {start}",
                    c.len()
                )));
            }
        }
        let vocab = self.cfg.vocab();
        let mut ids = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= vocab {
                return Err(Error::InvalidToken {
                    token: t,
                    position: start + i,
                });
            }
            ids.push(t as usize);
        }
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let te = g.param(&self.tok_embed);
        let pe = g.param(&self.pos_embed);
        let te = g.gather(te, &ids)?;
        let pe = g.gather(pe, &positions)?;
        let mut x = g.add(te, pe)?;
        let heads = self.cfg.attn_heads;
        let mut fresh_kv = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let h = b.ln1.forward(g, x)?;
            let q = b.q.forward(g, h)?;
            let k = b.k.forward(g, h)?;
            let v = b.v.forward(g, h)?;
            let past = cache.and_then(|c| c.past(i));
            let a = g.attention(q, k, v, heads, true, past)?;
            let o = b.o.forward(g, a)?;
            x = g.add(x, o)?;
            fresh_kv.push((k, v));

            let h = b.ln2.forward(g, x)?;
            let q = b.cq.forward(g, h)?;
            let (mk, mv) = match memory {
                Memory::Var(m) => (b.ck.forward(g, m)?, b.cv.forward(g, m)?),
                Memory::Prepared(p) => (g.constant(&p.blocks[i].0), g.constant(&p.blocks[i].1)),
            };
            let a = g.attention(q, mk, mv, heads, false, None)?;
            let o = b.co.forward(g, a)?;
            x = g.add(x, o)?;

            let h = b.ln3.forward(g, x)?;
            let f = b.fc1.forward(g, h)?;
            let f = g.gelu(f)?;
            let f = b.fc2.forward(g, f)?;
            x = g.add(x, f)?;
        }
        let hidden = self.final_norm.forward(g, x)?;
        let logits = self.lm_head.forward(g, hidden)?;
        Ok(Trunk {
            hidden,
            logits,
            fresh_kv,
        })
    }

    /// Runs a window at the cache's current length and extends the cache.
    pub fn backbone_forward(
        &self,
        window: &[u32],
        cache: &mut KvCache,
        prep: &PreparedCondition,
    ) -> Result<WindowOut> {
        let start = cache.len();
        let (out, fresh) = {
            let mut g = Graph::inference();
            let t = self.trunk(&mut g, window, start, Memory::Prepared(prep), Some(cache))?;
            let fresh: Vec<(Tensor, Tensor)> = t
                .fresh_kv
                .iter()
                .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
                .collect();
            let out = WindowOut {
                probs: softmax_rows(g.value(t.logits)),
                hidden: g.value(t.hidden).clone(),
            };
            (out, fresh)
        };
        cache.extend(fresh)?;
        Ok(out)
    }

    fn head(&self, d: usize) -> Result<&DraftHead> {
        if d == 0 || d > self.heads.len() {
            return Err(Error::Config(format!(
                "draft head {d} out of range 1..={}",
                self.heads.len()
            )));
        }
        Ok(&self.heads[d - 1])
    }

    /// Draft head logits on graph values.
    pub fn head_graph<'a>(&'a self, g: &mut Graph<'a>, d: usize, hidden: Var, memory: Memory<'a>) -> Result<Var> {
        self.head(d)?.forward(g, hidden, memory)
    }

    /// Distributions of draft head `d`, one row per hidden row.
    pub fn head_forward(&self, d: usize, hidden: &Tensor, prep: &PreparedCondition) -> Result<Tensor> {
        let head = self.head(d)?;
        let mut g = Graph::inference();
        let h = g.constant(hidden);
        let logits = head.forward(&mut g, h, Memory::Prepared(prep))?;
        Ok(softmax_rows(g.value(logits)))
    }

    fn target_linears(&mut self, targets: LoraTargets) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            let [q, k, v, o, cq, ck, cv, co, fc1, fc2] = b.linears_mut();
            match targets {
                LoraTargets::All => out.extend([q, k, v, o, cq, ck, cv, co, fc1, fc2]),
                LoraTargets::Outputs => out.extend([o, co, fc2]),
            }
        }
        out.push(&mut self.lm_head);
        out
    }

    pub fn attach_lora(&mut self, rank: usize, alpha: f32, targets: LoraTargets, seed: u64) -> Result<usize> {
        if rank == 0 || !(alpha > 0.0) {
            return Err(Error::Config(format!("LoRA rank {rank} / alpha {alpha} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = 0;
        for l in self.target_linears(targets) {
            l.attach_lora(&mut rng, rank, alpha);
            n += 1;
        }
        Ok(n)
    }

    pub fn has_lora(&self) -> bool {
        self.params().iter().any(|p| is_lora_param(&p.name))
    }

    /// Folds every adapter into its weight.
    pub fn merge_lora(&mut self) -> Result<()> {
        for l in self.target_linears(LoraTargets::All) {
            l.merge_lora()?;
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, f: impl Fn(&str) -> bool) {
        for p in self.params_mut() {
            p.trainable = f(&p.name);
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.has_lora() {
            return Err(Error::State("merge LoRA adapters before saving".into()));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors: Vec<(&str, &Tensor)> = self
            .params()
            .into_iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &tensors)?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, self.cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        if !cfg_path.exists() {
            return Err(Error::Dependency(format!("no model config at {}", cfg_path.display())));
        }
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg = ModelConfig::parse(&text)?;
        let mut model = Model::init(&cfg, 0)?;
        let mut tensors: std::collections::HashMap<String, Tensor> =
            checkpoint::load(&dir.join(CHECKPOINT_FILE))?.into_iter().collect();
        for p in model.params_mut() {
            let t = tensors
                .remove(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor '{extra}'")));
        }
        Ok(model)
    }
}

impl Module for Model {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.encoder.fc1.params();
        v.extend(self.encoder.fc2.params());
        v.push(&self.tok_embed);
        v.push(&self.pos_embed);
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.final_norm.params());
        v.extend(self.lm_head.params());
        for h in &self.heads {
            v.extend(h.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.encoder.fc1.params_mut();
        v.extend(self.encoder.fc2.params_mut());
        v.push(&mut self.tok_embed);
        v.push(&mut self.pos_embed);
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.final_norm.params_mut());
        v.extend(self.lm_head.params_mut());
        for h in &mut self.heads {
            v.extend(h.params_mut());
        }
        v
    }
}
