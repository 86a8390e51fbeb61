//! f64 re-implementation of the full network, read from parameter values.

use std::collections::HashMap;

use meshdraft::model::{HeadKind, Model};
use meshdraft::tensor::Module;

use super::oracle::{self, to64};

pub struct RefModel {
    pub params: HashMap<String, (Vec<usize>, Vec<f64>)>,
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub draft: usize,
    pub kind: HeadKind,
    pub lora_scale: f64,
}

impl RefModel {
    pub fn from_model(m: &Model, lora_scale: f64) -> Self {
        RefModel {
            params: m
                .params()
                .into_iter()
                .map(|p| (p.name.clone(), (p.value.shape().to_vec(), to64(p.value.data()))))
                .collect(),
            blocks: m.cfg.blocks,
            width: m.cfg.d_model,
            heads: m.cfg.attn_heads,
            draft: m.heads.len(),
            kind: m.cfg.head_kind,
            lora_scale,
        }
    }

    fn p(&self, n: &str) -> &[f64] {
        &self.params.get(n).unwrap_or_else(|| panic!("no param {n}")).1
    }

    fn linear(&self, name: &str, x: &[f64], rows: usize) -> Vec<f64> {
        let (shape, w) = &self.params[&format!("{name}.weight")];
        let (fi, fo) = (shape[0], shape[1]);
        let mut y = oracle::matmul(x, rows, fi, w, fo);
        if let Some((ashape, a)) = self.params.get(&format!("{name}.lora_a")) {
            let r = ashape[1];
            let xa = oracle::matmul(x, rows, fi, a, r);
            let xab = oracle::matmul(&xa, rows, r, self.p(&format!("{name}.lora_b")), fo);
            for (o, d) in y.iter_mut().zip(xab) {
                *o += self.lora_scale * d;
            }
        }
        oracle::add_row(&mut y, self.p(&format!("{name}.bias")));
        y
    }

    fn norm(&self, name: &str, x: &[f64]) -> Vec<f64> {
        oracle::layer_norm(x, self.width, self.p(&format!("{name}.gain")), self.p(&format!("{name}.bias")))
    }

    pub fn memory(&self, points: &[f64]) -> Vec<f64> {
        let n = points.len() / 3;
        let h: Vec<f64> = self.linear("cond.fc1", points, n).into_iter().map(oracle::gelu).collect();
        self.linear("cond.fc2", &h, n)
    }

    /// Returns (hidden, logits) for the whole sequence from position 0.
    pub fn trunk(&self, tokens: &[u32], memory: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = self.width;
        let n = tokens.len();
        let p = memory.len() / w;
        let te = self.p("embed.token");
        let pe = self.p("embed.pos");
        let mut x: Vec<f64> = Vec::with_capacity(n * w);
        for (i, &t) in tokens.iter().enumerate() {
            for c in 0..w {
                x.push(te[t as usize * w + c] + pe[i * w + c]);
            }
        }
        for b in 0..self.blocks {
            let pre = |s: &str| format!("blocks.{b}.{s}");
            let h = self.norm(&pre("ln1"), &x);
            let q = self.linear(&pre("attn.q"), &h, n);
            let k = self.linear(&pre("attn.k"), &h, n);
            let v = self.linear(&pre("attn.v"), &h, n);
            let a = oracle::attention(&q, n, &k, &v, n, 0, w, self.heads, true);
            let o = self.linear(&pre("attn.o"), &a, n);
            x.iter_mut().zip(o).for_each(|(a, b)| *a += b);

            let h = self.norm(&pre("ln2"), &x);
            let q = self.linear(&pre("cross.q"), &h, n);
            let k = self.linear(&pre("cross.k"), memory, p);
            let v = self.linear(&pre("cross.v"), memory, p);
            let a = oracle::attention(&q, n, &k, &v, p, 0, w, self.heads, false);
            let o = self.linear(&pre("cross.o"), &a, n);
            x.iter_mut().zip(o).for_each(|(a, b)| *a += b);

            let h = self.norm(&pre("ln3"), &x);
            let f: Vec<f64> = self.linear(&pre("ffn.fc1"), &h, n).into_iter().map(oracle::gelu).collect();
            let f = self.linear(&pre("ffn.fc2"), &f, n);
            x.iter_mut().zip(f).for_each(|(a, b)| *a += b);
        }
        let hidden = self.norm("final_norm", &x);
        let logits = self.linear("lm_head", &hidden, n);
        (hidden, logits)
    }

    pub fn head(&self, d: usize, hidden: &[f64], memory: &[f64]) -> Vec<f64> {
        let w = self.width;
        let n = hidden.len() / w;
        let pre = |s: &str| format!("heads.{d}.{s}");
        let delta = match self.kind {
            HeadKind::CrossAttention => {
                let p = memory.len() / w;
                let q = self.linear(&pre("q"), hidden, n);
                let k = self.linear(&pre("k"), memory, p);
                let v = self.linear(&pre("v"), memory, p);
                let a = oracle::attention(&q, n, &k, &v, p, 0, w, 1, false);
                self.linear(&pre("o"), &a, n)
            }
            HeadKind::Mlp => {
                let h: Vec<f64> = self.linear(&pre("fc1"), hidden, n).into_iter().map(oracle::gelu).collect();
                self.linear(&pre("fc2"), &h, n)
            }
        };
        let r: Vec<f64> = hidden.iter().zip(delta).map(|(a, b)| a + b).collect();
        let z = self.norm(&pre("norm"), &r);
        self.linear(&pre("out"), &z, n)
    }
}
