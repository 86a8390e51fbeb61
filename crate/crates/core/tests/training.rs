use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use meshdraft::mesh::{generate_corpus, CorpusSpec, Family, Vocabulary};
use meshdraft::model::{is_head_param, is_lora_param, HeadKind, Model, ModelConfig};
use meshdraft::par::Parallelism;
use meshdraft::specdec::replay_probabilities;
use meshdraft::tensor::Module;
use meshdraft::training::*;
use meshdraft::Error;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        blocks: 1,
        d_model: 16,
        attn_heads: 2,
        ffn: 32,
        bins: 16,
        max_len: 128,
        draft_heads: 3,
        head_kind: HeadKind::CrossAttention,
        cond_points: 16,
    }
}

fn boxes(n: usize) -> Vec<Example> {
    let cfg = tiny_cfg();
    let spec = CorpusSpec {
        count: n,
        seed: 5,
        mix: vec![(Family::Box, 1.0)],
    };
    let shapes = generate_corpus(&spec, Parallelism::Sequential).unwrap();
    let v = Vocabulary::new(cfg.bins).unwrap();
    build_examples(&shapes, &v, cfg.max_len, cfg.cond_points, 1, Parallelism::Sequential)
        .unwrap()
        .0
}

fn quick(stage: Stage, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        ..TrainConfig::for_stage(stage)
    }
}

#[test]
fn pretrain_starts_near_uniform_and_is_deterministic() {
    let ex = boxes(8);
    let cfg = tiny_cfg();
    let run = || {
        let mut m = Model::init(&cfg, 3).unwrap();
        let mut log = TrainLog::in_memory();
        pretrain_backbone(&mut m, &ex, &quick(Stage::Pretrain, 3), &mut log).unwrap();
        log.records
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    let ln_v = (cfg.vocab() as f64).ln();
    assert!((a[0].loss - ln_v).abs() < 0.1 * ln_v, "{} vs {ln_v}", a[0].loss);
    assert_eq!(a.len(), 6);
    assert!(a.iter().all(|r| r.head_losses.is_empty() && r.backbone_loss == Some(r.loss)));
    assert!(a.iter().all(|r| r.clip_factor <= 1.0 && r.grad_norm > 0.0));
    assert!(a.last().unwrap().loss < a[0].loss);
}

#[test]
fn overlong_sequences_are_skipped() {
    let mut ex = boxes(3);
    ex[1].tokens.extend(std::iter::repeat(3).take(200));
    let mut m = Model::init(&tiny_cfg(), 3).unwrap();
    let s = pretrain_backbone(&mut m, &ex, &quick(Stage::Pretrain, 1), &mut TrainLog::in_memory()).unwrap();
    assert_eq!((s.examples, s.skipped), (2, 1));
}

#[test]
fn single_sequence_is_memorized_by_all_heads() {
    let ex = boxes(1);
    let cfg = ModelConfig {
        d_model: 64,
        attn_heads: 4,
        ffn: 128,
        ..tiny_cfg()
    };
    let mut m = Model::init(&cfg, 3).unwrap();
    let mut c = quick(Stage::Pretrain, 150);
    c.lr_start = 3e-3;
    c.lr_end = 1e-3;
    pretrain_backbone(&mut m, &ex, &c, &mut TrainLog::in_memory()).unwrap();
    let mut c1 = quick(Stage::Stage1, 600);
    c1.lr_start = 3e-3;
    c1.lr_end = 1e-3;
    train_heads_stage1(&mut m, &ex, &c1, &mut TrainLog::in_memory()).unwrap();
    let mut c2 = quick(Stage::Stage2, 300);
    c2.lr_start = 3e-3;
    c2.lr_end = 1e-3;
    train_joint_stage2(&mut m, &ex, &c2, &mut TrainLog::in_memory()).unwrap();
    m.merge_lora().unwrap();
    let ev = evaluate_heads(&m, &ex, Parallelism::Sequential).unwrap();
    for r in &ev.rows {
        assert!(r.top1 > 0.95, "head {} top1 {}", r.head, r.top1);
    }
    assert_eq!(ev, evaluate_heads(&m, &ex, Parallelism::Parallel).unwrap());
}

#[test]
fn random_heads_score_at_chance() {
    let cfg = ModelConfig {
        bins: 64,
        ..tiny_cfg()
    };
    let m = Model::init(&cfg, 9).unwrap();
    let v = Vocabulary::new(cfg.bins).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ex: Vec<Example> = (0..40)
        .map(|id| Example {
            id,
            points: (0..cfg.cond_points)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect(),
            tokens: std::iter::once(v.sos())
                .chain((0..100).map(|_| rng.gen_range(0..v.bins)))
                .collect(),
        })
        .collect();
    let ev = evaluate_heads(&m, &ex, Parallelism::Parallel).unwrap();
    let p = 1.0 / v.bins as f64;
    for r in &ev.rows {
        let sd1 = (p * (1.0 - p) / r.count as f64).sqrt();
        let p5 = 5.0 * p;
        let sd5 = (p5 * (1.0 - p5) / r.count as f64).sqrt();
        assert!(r.top1 < p + 4.0 * sd1, "head {} top1 {}", r.head, r.top1);
        assert!(r.top5 < p5 + 4.0 * sd5, "head {} top5 {}", r.head, r.top5);
    }
}

#[test]
fn stage1_touches_only_heads() {
    let ex = boxes(6);
    let mut m = Model::init(&tiny_cfg(), 3).unwrap();
    let backbone = param_hash(&m, |n| !is_head_param(n));
    let heads = param_hash(&m, is_head_param);
    let mut log = TrainLog::in_memory();
    train_heads_stage1(&mut m, &ex, &quick(Stage::Stage1, 2), &mut log).unwrap();
    assert_eq!(param_hash(&m, |n| !is_head_param(n)), backbone);
    assert_ne!(param_hash(&m, is_head_param), heads);
    for r in &log.records {
        assert_eq!(r.head_losses.len(), 3);
        assert!(r.backbone_loss.is_none());
        let mhd = mhd_loss(&r.head_losses, 0.8);
        assert!((r.loss - mhd).abs() < 1e-6 * r.loss.abs().max(1.0));
    }
}

#[test]
fn stage2_trains_adapters_and_heads_only() {
    let ex = boxes(6);
    let mut m = Model::init(&tiny_cfg(), 3).unwrap();
    let base = param_hash(&m, |n| !is_head_param(n));
    let mut log = TrainLog::in_memory();
    train_joint_stage2(&mut m, &ex, &quick(Stage::Stage2, 2), &mut log).unwrap();
    assert!(m.has_lora());
    assert_eq!(param_hash(&m, |n| !is_head_param(n) && !is_lora_param(n)), base);
    assert!(m
        .params()
        .iter()
        .filter(|p| p.name.ends_with(".lora_b"))
        .any(|p| p.value.data().iter().any(|&x| x != 0.0)));
    for r in &log.records {
        let b = r.backbone_loss.unwrap();
        let expect = 50.0 * b + r.mhd_loss.unwrap();
        assert!((r.loss - expect).abs() <= 1e-6 * r.loss.abs().max(1.0), "{} vs {expect}", r.loss);
    }
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(m.save(dir.path()), Err(Error::State(_))));
    m.merge_lora().unwrap();
    m.save(dir.path()).unwrap();
}

#[test]
fn stage_configs_are_checked() {
    let ex = boxes(2);
    let mut m = Model::init(&tiny_cfg(), 3).unwrap();
    let mut log = TrainLog::in_memory();
    let r = train_heads_stage1(&mut m, &ex, &quick(Stage::Stage2, 1), &mut log);
    assert!(matches!(r, Err(Error::Config(_))));
    m.reset_heads(HeadKind::Mlp, 0, 1).unwrap();
    let r = train_heads_stage1(&mut m, &ex, &quick(Stage::Stage1, 1), &mut log);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn training_log_streams_json_lines() {
    let ex = boxes(4);
    let mut m = Model::init(&tiny_cfg(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let mut log = TrainLog::to_file(&path).unwrap();
    pretrain_backbone(&mut m, &ex, &quick(Stage::Pretrain, 2), &mut log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let parsed: Vec<StepRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, log.records);
    let keys: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for k in ["step", "stage", "lr", "backbone_loss", "head_losses", "grad_norm", "clip_factor"] {
        assert!(keys.get(k).is_some(), "missing {k}");
    }
}

#[test]
fn distill_corpus_is_self_consistent_and_reproducible() {
    let ex = boxes(4);
    let cfg = ModelConfig {
        max_len: 40,
        ..tiny_cfg()
    };
    let m = Model::init(&cfg, 3).unwrap();
    let settings = DistillSettings {
        seed: 11,
        ..Default::default()
    };
    let a = generate_distill_corpus(&m, &ex, 6, &settings, Parallelism::Parallel).unwrap();
    let b = generate_distill_corpus(&m, &ex, 6, &settings, Parallelism::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records, b.records);
    assert_eq!(a.len(), 6);
    let v = Vocabulary::new(cfg.bins).unwrap();
    for r in &a.records {
        assert_eq!(r.tokens[0], v.sos());
        assert!(r.tokens.len() <= 40);
        let cond = m.encode_condition(&r.cloud()).unwrap();
        let p = replay_probabilities(&m, &cond, &r.tokens).unwrap();
        assert!(p.iter().all(|&x| x > 0.0));
    }
    let corpus = generate_distill_corpus(
        &m,
        &ex,
        3,
        &DistillSettings {
            labels: LabelSource::Corpus,
            ..settings.clone()
        },
        Parallelism::Sequential,
    )
    .unwrap();
    assert_eq!(corpus.records[1].tokens, ex[1].tokens);
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let back = DistillCorpus::load(dir.path()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.records, a.records);
    assert!(matches!(
        DistillCorpus::load(&dir.path().join("missing")),
        Err(Error::Dependency(_))
    ));
}

proptest! {
    #[test]
    fn labels_match_hand_slices(tokens in prop::collection::vec(0u32..20, 1..40), head in 0usize..6) {
        let labels = shifted_labels(&tokens, head, tokens.len());
        let shift = head + 1;
        let hand: Vec<Option<u32>> = tokens
            .iter()
            .skip(shift)
            .map(|&t| Some(t))
            .chain(std::iter::repeat(None))
            .take(tokens.len())
            .collect();
        prop_assert_eq!(labels, hand);
    }
}
