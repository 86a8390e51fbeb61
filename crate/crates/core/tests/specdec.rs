mod common;

use meshdraft::mesh::PointCloud;
use meshdraft::model::{Condition, HeadKind, Model, ModelConfig};
use meshdraft::specdec::{
    decode, provenance_violations, pts_paths, rank, replay_probabilities, resample_pts, rollback_cache, top_indices,
    vanilla_decode, verify, Acceptance, DecodeConfig, Provenance, Strategy,
};
use meshdraft::Error;
use proptest::prelude::*;
use rand::Rng;

fn model() -> Model {
    let cfg = ModelConfig {
        blocks: 2,
        d_model: 16,
        attn_heads: 2,
        ffn: 32,
        bins: 8,
        max_len: 48,
        draft_heads: 4,
        head_kind: HeadKind::CrossAttention,
        cond_points: 8,
    };
    Model::init(&cfg, 31).unwrap()
}

fn condition(m: &Model, seed: u64) -> Condition {
    let mut r = common::rng(seed);
    let pc = PointCloud::from_points((0..8).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect());
    m.encode_condition(&pc).unwrap()
}

#[test]
fn zero_heads_reduces_to_vanilla() {
    let m = model();
    for seed in 0..20 {
        let c = condition(&m, seed);
        let cfg = DecodeConfig {
            draft_heads: 0,
            seed,
            ..Default::default()
        };
        let a = decode(&m, &c, &cfg).unwrap();
        let b = vanilla_decode(&m, &c, &cfg).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(b.trace.scr(), Some(1.0));
    }
}

#[test]
fn accepted_counts_bounded_and_provenance_sound() {
    let m = model();
    for (i, delta) in [0.0f32, 0.02, 0.05, 0.1].into_iter().enumerate() {
        for seed in 0..15 {
            let c = condition(&m, 100 + seed);
            let rule = Acceptance::Threshold { delta };
            let cfg = DecodeConfig {
                acceptance: rule,
                seed: seed + 10 * i as u64,
                ..Default::default()
            };
            let out = decode(&m, &c, &cfg).unwrap();
            for it in &out.trace.iterations {
                assert!((1..=5).contains(&it.accepted()));
                assert_eq!(it.s_star, it.s + it.accepted());
                let (last, head) = it.provenance.split_last().unwrap();
                assert!(head.iter().all(|p| *p == Provenance::HeadVerified));
                assert!(*last == Provenance::BackboneSampled || *it.tokens.last().unwrap() == 9);
                for (p, prov) in it.p0.iter().zip(&it.provenance) {
                    if *prov == Provenance::HeadVerified {
                        assert!(*p > delta);
                    }
                }
            }
            let scr = out.trace.scr().unwrap();
            assert!((1.0..=5.0).contains(&scr));
            assert_eq!(provenance_violations(&m, &c, &out, &rule).unwrap(), 0);
            if delta == 0.0 {
                assert!(scr > 3.0, "everything with p0 > 0 passes: {scr}");
            }
            let eos = 9;
            if let Some(p) = out.tokens.iter().position(|&t| t == eos) {
                assert_eq!(p, out.tokens.len() - 1);
                assert!(out.trace.terminated);
            } else {
                assert_eq!(out.tokens.len(), 48);
                assert!(!out.trace.terminated);
            }
        }
    }
}

#[test]
fn top_ka_decoding_is_sound() {
    let m = model();
    let rule = Acceptance::TopK { k: 3 };
    for seed in 0..5 {
        let c = condition(&m, 200 + seed);
        let cfg = DecodeConfig {
            acceptance: rule,
            strategy: Strategy::Pts { k: 2, prune: 1e-5 },
            seed,
            ..Default::default()
        };
        let out = decode(&m, &c, &cfg).unwrap();
        assert_eq!(provenance_violations(&m, &c, &out, &rule).unwrap(), 0);
    }
}

#[test]
fn vanilla_probabilities_match_replay_and_greedy_is_deterministic() {
    let m = model();
    let c = condition(&m, 7);
    let cfg = DecodeConfig {
        seed: 3,
        ..Default::default()
    };
    let out = vanilla_decode(&m, &c, &cfg).unwrap();
    let replay = replay_probabilities(&m, &c, &out.tokens).unwrap();
    let recorded: Vec<f32> = out.trace.iterations.iter().map(|i| i.p0[0]).collect();
    for (a, b) in recorded.iter().zip(&replay) {
        assert!((a - b).abs() < 1e-5);
    }
    let greedy = |seed| {
        vanilla_decode(&m, &c, &DecodeConfig { temperature: 0.0, seed, ..Default::default() })
            .unwrap()
            .tokens
    };
    assert_eq!(greedy(1), greedy(2));
}

#[test]
fn decode_config_rejections() {
    let m = model();
    let c = condition(&m, 1);
    let bad = [
        DecodeConfig { draft_heads: 5, ..Default::default() },
        DecodeConfig { acceptance: Acceptance::Threshold { delta: 1.0 }, ..Default::default() },
        DecodeConfig { strategy: Strategy::Pts { k: 0, prune: 0.0 }, ..Default::default() },
        DecodeConfig { max_len: Some(1000), ..Default::default() },
        DecodeConfig { temperature: -1.0, ..Default::default() },
    ];
    for cfg in bad {
        assert!(matches!(decode(&m, &c, &cfg), Err(Error::Config(_))));
    }
}

#[test]
fn rollback_equivalences() {
    let m = model();
    let c = condition(&m, 9);
    let prep = m.prepare(&c).unwrap();
    let toks: Vec<u32> = vec![8, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2];
    let mut fresh = m.new_cache();
    let want = m.backbone_forward(&toks[..8], &mut fresh, &prep).unwrap();

    let mut cache = m.new_cache();
    m.backbone_forward(&toks[..8], &mut cache, &prep).unwrap();
    rollback_cache(&mut cache, 0).unwrap();
    let again = m.backbone_forward(&toks[..8], &mut cache, &prep).unwrap();
    assert!(again.probs.max_abs_diff(&want.probs) < 1e-6);

    // extend 8, roll back to 5, extend the same 3
    let mut cache = m.new_cache();
    m.backbone_forward(&[8, 1, 2, 3, 4, 0, 0, 0], &mut cache, &prep).unwrap();
    rollback_cache(&mut cache, 5).unwrap();
    rollback_cache(&mut cache, 5).unwrap();
    let tail = m.backbone_forward(&toks[5..8], &mut cache, &prep).unwrap();
    for r in 0..3 {
        let d = tail.probs.row(r).iter().zip(want.probs.row(5 + r)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(d < 1e-5);
    }
    assert!(matches!(rollback_cache(&mut cache, 9), Err(Error::State(_))));
}

fn random_dists(r: &mut rand_chacha::ChaCha8Rng, rows: usize, width: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let w: Vec<f64> = (0..width).map(|_| r.gen_range(0.01..1.0f64).powi(2)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

#[test]
fn pts_matches_enumeration() {
    let mut r = common::rng(41);
    for (d, k) in [(1, 2), (2, 2), (2, 3), (3, 2), (3, 3)] {
        let dists = random_dists(&mut r, d, 5);
        let mut enumerated = vec![(Vec::new(), 1.0f64)];
        for row in &dists {
            let top = top_indices(row, k);
            enumerated = enumerated
                .into_iter()
                .flat_map(|(p, w)| top.iter().map(move |&t| {
                    let mut q: Vec<u32> = p.clone();
                    q.push(t as u32);
                    (q, w * row[t])
                }).collect::<Vec<_>>())
                .collect();
        }
        let total: f64 = enumerated.iter().map(|e| e.1).sum();
        let n = 100_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            *counts.entry(resample_pts(&dists, k, 0.0, &mut r).unwrap()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), enumerated.len());
        for (path, w) in &enumerated {
            let p = w / total;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let got = *counts.get(path).unwrap_or(&0) as f64;
            assert!((got - n as f64 * p).abs() <= 3.0 * sigma + 1e-9, "{path:?}");
        }
    }
}

#[test]
fn pts_argmax_and_prune_floor() {
    let mut r = common::rng(42);
    for _ in 0..50 {
        let dists = random_dists(&mut r, 3, 6);
        let path = resample_pts(&dists, 1, 1e-5, &mut r).unwrap();
        let argmax: Vec<u32> = dists.iter().map(|d| top_indices(d, 1)[0] as u32).collect();
        assert_eq!(path, argmax);
    }
    let sharp: Vec<Vec<f64>> = (0..4).map(|_| vec![0.9969, 0.003, 0.0001]).collect();
    for (p, w) in pts_paths(&sharp, 3, 1e-5) {
        let mut prefix = 1.0;
        for (i, &t) in p.iter().enumerate() {
            prefix *= sharp[i][t as usize];
            assert!(prefix >= 1e-5);
        }
        assert!((prefix - w).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn top1_acceptance_is_argmax_membership(row in prop::collection::vec(0u8..5, 2..8), t in 0usize..8) {
        let t = t % row.len();
        let row: Vec<f32> = row.iter().map(|&x| x as f32 / 4.0).collect();
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        prop_assert_eq!(Acceptance::TopK { k: 1 }.accepts(&row, t as u32), t == best);
        prop_assert_eq!(rank(&row, best), 0);
    }

    #[test]
    fn raising_delta_never_accepts_more(
        probs in prop::collection::vec(0.0f32..1.0, 1..6),
        lo in 0.0f32..0.99,
        step in 0.0f32..0.5,
    ) {
        let rows: Vec<Vec<f32>> = probs.iter().map(|&p| vec![p, 1.0 - p]).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let cands = vec![0u32; rows.len()];
        let hi = (lo + step).min(0.999);
        let a = verify(&refs, &cands, &Acceptance::Threshold { delta: lo });
        let b = verify(&refs, &cands, &Acceptance::Threshold { delta: hi });
        prop_assert!(b <= a);
    }
}
