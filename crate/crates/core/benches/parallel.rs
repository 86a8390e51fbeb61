use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use meshdraft::mesh::{generate_corpus, CorpusSpec, Vocabulary};
use meshdraft::model::{HeadKind, Model, ModelConfig};
use meshdraft::par::Parallelism;
use meshdraft::training::{build_examples, pretrain_backbone, Stage, TrainConfig, TrainLog};

const MODES: [(&str, Parallelism); 2] = [("parallel", Parallelism::Parallel), ("sequential", Parallelism::Sequential)];

fn corpus(c: &mut Criterion) {
    let spec = CorpusSpec::uniform(96, 1);
    let mut g = c.benchmark_group("corpus_96_shapes");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_corpus(&spec, mode).unwrap())
        });
    }
    g.finish();
}

fn training_epoch(c: &mut Criterion) {
    let cfg = ModelConfig {
        blocks: 2,
        d_model: 64,
        attn_heads: 4,
        ffn: 256,
        bins: 64,
        max_len: 128,
        draft_heads: 4,
        head_kind: HeadKind::CrossAttention,
        cond_points: 64,
    };
    let shapes = generate_corpus(&CorpusSpec::uniform(64, 2), Parallelism::Parallel).unwrap();
    let vocab = Vocabulary::new(cfg.bins).unwrap();
    let (examples, _) = build_examples(&shapes, &vocab, cfg.max_len, cfg.cond_points, 2, Parallelism::Parallel).unwrap();
    let model = Model::init(&cfg, 0).unwrap();
    let mut g = c.benchmark_group("pretrain_epoch");
    g.sample_size(10);
    for (name, mode) in MODES {
        let tc = TrainConfig {
            epochs: 1,
            parallelism: mode,
            ..TrainConfig::for_stage(Stage::Pretrain)
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut m = model.clone();
                pretrain_backbone(&mut m, &examples, &tc, &mut TrainLog::in_memory()).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, corpus, training_epoch);
criterion_main!(benches);
