//! Finite-difference check of the whole model loss.

use meshdraft::model::{predicted_position, HeadKind, LoraTargets, Memory, Model, ModelConfig};
use meshdraft::tensor::{Graph, Module, Tensor};
use rand::Rng;

use super::oracle::{cross_entropy, rel_err, to64};
use super::reference::RefModel;

fn labels_for(tokens: &[u32], head: usize) -> Vec<Option<u32>> {
    (0..tokens.len())
        .map(|s| tokens.get(predicted_position(s, head)).copied())
        .collect()
}

/// Backbone CE plus weighted draft-head CE, all trainable parameters checked.
/// Returns the number of sampled coordinates and their relative error.
pub fn full_model_check(kind: HeadKind, with_lora: bool) -> (usize, f64) {
    let cfg = ModelConfig {
        blocks: 2,
        d_model: 8,
        attn_heads: 2,
        ffn: 16,
        bins: 8,
        max_len: 16,
        draft_heads: 2,
        head_kind: kind,
        cond_points: 4,
    };
    let mut m = Model::init(&cfg, 21).unwrap();
    let alpha = 4.0;
    let rank = 2;
    if with_lora {
        m.attach_lora(rank, alpha, LoraTargets::All, 3).unwrap();
    }
    let mut r = super::rng(5);
    // Non-zero adapters and biases so every path carries signal.
    for p in m.params_mut() {
        if p.name.ends_with(".lora_b") || p.name.ends_with(".bias") {
            let shape = p.value.shape().to_vec();
            p.value = super::rand_tensor(&mut r, &shape, 0.2);
        }
    }
    let tokens: Vec<u32> = (0..9).map(|_| r.gen_range(0..cfg.vocab() as u32)).collect();
    let points = super::rand_tensor(&mut r, &[4, 3], 1.0);
    let weights = [1.5f32, 0.8, 0.64];

    let mut g = Graph::new();
    let pts = g.input(points.clone());
    let mem = m.encode_graph(&mut g, pts).unwrap();
    let t = m.trunk(&mut g, &tokens, 0, Memory::Var(mem), None).unwrap();
    let mut terms = vec![(g.cross_entropy(t.logits, &labels_for(&tokens, 0), 1.0).unwrap(), weights[0])];
    for d in 1..=2 {
        let l = m.head_graph(&mut g, d, t.hidden, Memory::Var(mem)).unwrap();
        terms.push((g.cross_entropy(l, &labels_for(&tokens, d), 1.0).unwrap(), weights[d]));
    }
    let loss = g.weighted_sum(&terms).unwrap();
    let grads = g.backward(loss).unwrap();

    let scale = alpha as f64 / rank as f64;
    let base = RefModel::from_model(&m, scale);
    let pts64 = to64(points.data());
    let loss64 = |rm: &RefModel| -> f64 {
        let memory = rm.memory(&pts64);
        let (hidden, logits) = rm.trunk(&tokens, &memory);
        let v = cfg.vocab();
        let mut total = weights[0] as f64 * cross_entropy(&logits, v, &labels_for(&tokens, 0));
        for d in 1..=2 {
            let hl = rm.head(d, &hidden, &memory);
            total += weights[d] as f64 * cross_entropy(&hl, v, &labels_for(&tokens, d));
        }
        total
    };

    let mut ad = Vec::new();
    let mut fd = Vec::new();
    let mut pick = super::rng(77);
    let h = 1e-5;
    let mut rm = base;
    for p in m.params() {
        let g = grads.param(&p.name).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for _ in 0..3 {
            let i = pick.gen_range(0..p.value.len());
            let orig = rm.params[&p.name].1[i];
            rm.params.get_mut(&p.name).unwrap().1[i] = orig + h;
            let up = loss64(&rm);
            rm.params.get_mut(&p.name).unwrap().1[i] = orig - h;
            let down = loss64(&rm);
            rm.params.get_mut(&p.name).unwrap().1[i] = orig;
            fd.push((up - down) / (2.0 * h));
            ad.push(g.data()[i]);
        }
    }
    (ad.len(), rel_err(&ad, &fd))
}
