//! Pipeline stages over an on-disk workspace, and the benchmark runs.

use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::error::{Error, Result};
use crate::mesh::{
    build_shape, chamfer_distance, detokenize, generate_corpus, hausdorff_distance, obj_write, read_manifest,
    sample_points, write_manifest, ManifestRecord, Mesh, PointCloud, Vocabulary,
};
use crate::model::{HeadKind, Model};
use crate::par::{self, Parallelism};
use crate::specdec::{compute_metrics, decode, vanilla_decode, Acceptance, DecodeConfig, DecodeTrace, Strategy};
use crate::training::{
    build_examples, generate_distill_corpus, pretrain_backbone, read_examples, train_heads_stage1,
    train_joint_stage2, write_examples, DistillCorpus, Example, TrainLog,
};

use super::config::RunConfig;
use super::report::{BenchReport, BenchRow};

/// Label of the plain autoregressive row in every report.
pub const VANILLA: &str = "vanilla";

/// Directory layout shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.jsonl")
    }

    pub fn train_set(&self) -> PathBuf {
        self.data().join("train.jsonl")
    }

    pub fn held_out_set(&self) -> PathBuf {
        self.data().join("held_out.jsonl")
    }

    pub fn backbone(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn distill_corpus(&self) -> PathBuf {
        self.root.join("distill")
    }

    /// Checkpoint of head-training `stage` (1 or 2) for heads of `kind`.
    pub fn stage(&self, stage: u8, kind: HeadKind) -> PathBuf {
        match kind {
            HeadKind::CrossAttention => self.root.join(format!("stage{stage}")),
            HeadKind::Mlp => self.root.join(format!("stage{stage}_mlp")),
        }
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn need(path: &Path, step: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!("{} is missing; run `{step}` first", path.display())))
    }
}

fn load_model(dir: &Path, step: &str) -> Result<Model> {
    need(dir, step)?;
    Model::load(dir)
}

/// Held-out condition with the shape it was sampled from.
#[derive(Debug, Clone)]
pub struct Target {
    pub example: Example,
    pub mesh: Mesh,
}

pub struct DataSummary {
    pub shapes: usize,
    pub train: usize,
    pub held_out: usize,
    pub skipped: usize,
}

/// Writes the corpus, its manifest, one OBJ per shape, and the tokenized
/// train and held-out splits.
pub fn gen_data(cfg: &RunConfig, ws: &Workspace) -> Result<DataSummary> {
    let dir = ws.data();
    let shapes_dir = dir.join("shapes");
    std::fs::create_dir_all(&shapes_dir).map_err(|e| Error::io(&shapes_dir, e))?;
    let mode = cfg.parallelism();
    let shapes = generate_corpus(&cfg.corpus, mode)?;
    let records: Vec<ManifestRecord> = shapes.iter().map(|s| s.0.clone()).collect();
    write_manifest(&records, &ws.manifest())?;
    for (rec, mesh) in &shapes {
        obj_write(mesh, &shapes_dir.join(format!("{:05}_{}.obj", rec.id, rec.family.name())))?;
    }
    let vocab = Vocabulary::new(cfg.model.bins)?;
    let (examples, skipped) = build_examples(&shapes, &vocab, cfg.model.max_len, cfg.model.cond_points, cfg.corpus.seed, mode)?;
    if examples.len() <= cfg.held_out {
        return Err(Error::Config(format!(
            "only {} shapes fit max_len {}, need more than {} held out",
            examples.len(),
            cfg.model.max_len,
            cfg.held_out
        )));
    }
    let (train, held) = examples.split_at(examples.len() - cfg.held_out);
    write_examples(train, &ws.train_set())?;
    write_examples(held, &ws.held_out_set())?;
    cfg.echo_into(&dir)?;
    info!("{} shapes, {} train, {} held out, {skipped} too long", shapes.len(), train.len(), held.len());
    Ok(DataSummary {
        shapes: shapes.len(),
        train: train.len(),
        held_out: held.len(),
        skipped,
    })
}

fn train_examples(ws: &Workspace) -> Result<Vec<Example>> {
    need(&ws.train_set(), "gen-data")?;
    read_examples(&ws.train_set())
}

/// Held-out conditions paired with their ground-truth shapes.
pub fn held_out_targets(ws: &Workspace, limit: usize) -> Result<Vec<Target>> {
    need(&ws.held_out_set(), "gen-data")?;
    let records = read_manifest(&ws.manifest())?;
    read_examples(&ws.held_out_set())?
        .into_iter()
        .take(limit)
        .map(|example| {
            let rec = records
                .iter()
                .find(|r| r.id == example.id)
                .ok_or_else(|| Error::State(format!("shape {} not in manifest", example.id)))?;
            Ok(Target {
                mesh: build_shape(rec.family, rec.seed)?,
                example,
            })
        })
        .collect()
}

pub fn pretrain(cfg: &RunConfig, ws: &Workspace) -> Result<Model> {
    let train = train_examples(ws)?;
    let dir = ws.backbone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.echo_into(&dir)?;
    let mut model = Model::init(&cfg.model, cfg.pretrain.seed)?;
    let mut log = TrainLog::to_file(&dir.join("train_log.jsonl"))?;
    let s = pretrain_backbone(&mut model, &train, &cfg.pretrain, &mut log)?;
    info!("pretrain: {} steps, loss {:.4} -> {:.4}", s.steps, s.first_loss, s.final_loss);
    model.save(&dir)?;
    Ok(model)
}

/// Loads the distillation corpus, generating it from the backbone if absent.
pub fn distill_corpus(cfg: &RunConfig, ws: &Workspace, backbone: &Model) -> Result<DistillCorpus> {
    let dir = ws.distill_corpus();
    if dir.join(crate::training::distill::SETTINGS_FILE).exists() {
        let c = DistillCorpus::load(&dir)?;
        if c.settings == cfg.distill && c.len() == cfg.distill_count {
            return Ok(c);
        }
        info!("distillation settings changed; regenerating");
    }
    let train = train_examples(ws)?;
    let c = generate_distill_corpus(backbone, &train, cfg.distill_count, &cfg.distill, cfg.parallelism())?;
    c.save(&dir)?;
    cfg.echo_into(&dir)?;
    info!("distilled {} records ({} unterminated)", c.len(), c.unterminated);
    Ok(c)
}

/// Trains draft heads of `kind`: stage 1 on the frozen backbone, stage 2
/// jointly with adapters that are merged before saving.
pub fn distill(cfg: &RunConfig, ws: &Workspace, stage: u8, kind: HeadKind) -> Result<Model> {
    let dir = ws.stage(stage, kind);
    let (mut model, corpus) = match stage {
        1 => {
            let mut m = load_model(&ws.backbone(), "pretrain")?;
            let corpus = distill_corpus(cfg, ws, &m)?;
            m.reset_heads(kind, cfg.model.draft_heads, cfg.stage1.seed)?;
            (m, corpus)
        }
        2 => {
            let m = load_model(&ws.stage(1, kind), &stage_command(1, kind))?;
            need(&ws.distill_corpus(), &stage_command(1, kind))?;
            (m, DistillCorpus::load(&ws.distill_corpus())?)
        }
        _ => return Err(Error::Config(format!("unknown distillation stage {stage}"))),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.echo_into(&dir)?;
    let mut log = TrainLog::to_file(&dir.join("train_log.jsonl"))?;
    let s = if stage == 1 {
        train_heads_stage1(&mut model, &corpus.records, &cfg.stage1, &mut log)?
    } else {
        let s = train_joint_stage2(&mut model, &corpus.records, &cfg.stage2, &mut log)?;
        model.merge_lora()?;
        s
    };
    info!("stage {stage} ({kind}): {} steps, loss {:.4} -> {:.4}", s.steps, s.first_loss, s.final_loss);
    model.save(&dir)?;
    Ok(model)
}

pub fn stage_command(stage: u8, kind: HeadKind) -> String {
    match kind {
        HeadKind::CrossAttention => format!("distill --stage {stage}"),
        HeadKind::Mlp => format!("distill --stage {stage} --heads mlp"),
    }
}

/// The merged stage-2 model with cross-attention heads.
pub fn final_model(ws: &Workspace) -> Result<Model> {
    load_model(&ws.stage(2, HeadKind::CrossAttention), "distill --stage 2")
}

/// Point cloud for quality metrics. Meshes without area fall back to their
/// vertices, and an empty mesh to the single point at the origin.
pub fn metric_cloud(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    match sample_points(mesh, n, seed) {
        Ok(pc) => Ok(pc),
        Err(Error::Degenerate(_)) if mesh.vertices.is_empty() => Ok(PointCloud::from_points(vec![[0.0; 3]])),
        Err(Error::Degenerate(_)) => Ok(PointCloud::from_points(mesh.vertices.clone())),
        Err(e) => Err(e),
    }
}

/// One decoded sequence with its quality against the ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub trace: DecodeTrace,
    pub cd: f64,
    pub hd: f64,
}

/// A labelled decoding setup over one model.
#[derive(Debug, Clone)]
pub struct Arm<'a> {
    pub label: String,
    pub model: &'a Model,
    pub decode: DecodeConfig,
    /// Plain autoregressive decoding; `decode` supplies sampling settings.
    pub vanilla: bool,
}

impl<'a> Arm<'a> {
    pub fn vanilla(model: &'a Model, decode: &DecodeConfig) -> Self {
        Arm {
            label: VANILLA.into(),
            model,
            decode: decode.clone(),
            vanilla: true,
        }
    }

    pub fn speculative(label: impl Into<String>, model: &'a Model, decode: DecodeConfig) -> Self {
        Arm {
            label: label.into(),
            model,
            decode,
            vanilla: false,
        }
    }

    fn run(&self, target: &Target, index: usize, metric_points: usize) -> Result<Sample> {
        let cond = self.model.encode_condition(&target.example.cloud())?;
        let cfg = DecodeConfig {
            seed: crate::mesh::corpus::shape_seed(self.decode.seed, index),
            ..self.decode.clone()
        };
        let out = if self.vanilla {
            vanilla_decode(self.model, &cond, &cfg)?
        } else {
            decode(self.model, &cond, &cfg)?
        };
        let vocab = Vocabulary::new(self.model.cfg.bins)?;
        let det = detokenize(&out.tokens, &vocab)?;
        let seed = crate::mesh::corpus::shape_seed(0x6d65_7472, target.example.id);
        let truth = metric_cloud(&target.mesh, metric_points, seed)?;
        let got = metric_cloud(&det.mesh, metric_points, seed)?;
        Ok(Sample {
            cd: chamfer_distance(&got, &truth)?,
            hd: hausdorff_distance(&got, &truth)?,
            tokens: out.tokens,
            trace: out.trace,
        })
    }
}

/// Every arm's samples, one list per arm in target order.
#[derive(Debug, Clone)]
pub struct BenchRun {
    pub report: BenchReport,
    pub labels: Vec<String>,
    /// Draft heads each arm decoded with; 0 for vanilla.
    pub draft_heads: Vec<usize>,
    pub samples: Vec<Vec<Sample>>,
}

impl BenchRun {
    pub fn samples(&self, label: &str) -> Option<&[Sample]> {
        self.labels.iter().position(|l| l == label).map(|i| self.samples[i].as_slice())
    }
}

/// Decodes every target under every arm, interleaving arms per target so
/// drift in machine load hits all of them alike. The first arm is the
/// latency baseline.
pub fn run_arms(title: &str, arms: &[Arm], targets: &[Target], workers: usize, metric_points: usize) -> Result<BenchRun> {
    if arms.is_empty() || targets.is_empty() {
        return Err(Error::Config("a benchmark needs at least one arm and one condition".into()));
    }
    let mode = if workers > 1 { Parallelism::Parallel } else { Parallelism::Sequential };
    let per_target: Vec<Result<Vec<Sample>>> = par::with_workers(workers, || {
        par::map(targets, mode, |i, t| arms.iter().map(|a| a.run(t, i, metric_points)).collect())
    });
    let mut samples: Vec<Vec<Sample>> = vec![Vec::with_capacity(targets.len()); arms.len()];
    for row in per_target {
        for (k, s) in row?.into_iter().enumerate() {
            samples[k].push(s);
        }
    }
    let traces = |k: usize| -> Vec<DecodeTrace> { samples[k].iter().map(|s| s.trace.clone()).collect() };
    let base = traces(0);
    let mut report = BenchReport::new(title, arms[0].label.clone());
    for (k, arm) in arms.iter().enumerate() {
        let m = compute_metrics(&traces(k), &base)?;
        let n = samples[k].len() as f64;
        report.rows.push(BenchRow {
            label: arm.label.clone(),
            cd: samples[k].iter().map(|s| s.cd).sum::<f64>() / n,
            hd: samples[k].iter().map(|s| s.hd).sum::<f64>() / n,
            scr: m.scr,
            step_latency_ms: m.step_latency_ms,
            speedup: m.speedup,
            seq_latency_s: m.seq_latency_s,
        });
    }
    report.check()?;
    Ok(BenchRun {
        report,
        labels: arms.iter().map(|a| a.label.clone()).collect(),
        draft_heads: arms.iter().map(|a| if a.vanilla { 0 } else { a.decode.draft_heads }).collect(),
        samples,
    })
}

fn emit(cfg: &RunConfig, ws: &Workspace, stem: &str, run: &BenchRun) -> Result<()> {
    let dir = ws.reports();
    cfg.echo_into(&dir)?;
    run.report.write(&dir, stem)?;
    info!("\n{}", run.report.summary());
    Ok(())
}

/// Vanilla against speculative decoding of the final model.
pub fn bench(cfg: &RunConfig, ws: &Workspace) -> Result<BenchRun> {
    let model = final_model(ws)?;
    let targets = held_out_targets(ws, cfg.bench.conditions)?;
    let arms = [
        Arm::vanilla(&model, &cfg.decode),
        Arm::speculative("speculative", &model, cfg.decode.clone()),
    ];
    let run = run_arms("bench", &arms, &targets, cfg.bench.workers, cfg.bench.metric_points)?;
    emit(cfg, ws, "bench", &run)?;
    Ok(run)
}

/// Decodes the first `count` held-out conditions, writing OBJ and trace files.
pub fn generate(cfg: &RunConfig, ws: &Workspace, count: usize, out: &Path) -> Result<Vec<Sample>> {
    let model = final_model(ws)?;
    let targets = held_out_targets(ws, count)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.echo_into(out)?;
    let arm = Arm::speculative("speculative", &model, cfg.decode.clone());
    let vocab = Vocabulary::new(model.cfg.bins)?;
    let mut samples = Vec::with_capacity(targets.len());
    for (i, t) in targets.iter().enumerate() {
        let s = arm.run(t, i, cfg.bench.metric_points)?;
        let det = detokenize(&s.tokens, &vocab)?;
        for w in &det.warnings {
            warn!("condition {}: {w}", t.example.id);
        }
        let stem = format!("{:05}", t.example.id);
        if det.mesh.faces.is_empty() {
            warn!("condition {}: no faces decoded, OBJ skipped", t.example.id);
        } else {
            obj_write(&det.mesh, &out.join(format!("{stem}.obj")))?;
        }
        s.trace.write_jsonl(&out.join(format!("{stem}.trace.jsonl")))?;
        samples.push(s);
    }
    Ok(samples)
}

/// Sweeps run by `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Heads,
    Delta,
    Acceptance,
    Sampling,
    Variants,
}

impl Sweep {
    pub const ALL: [Sweep; 5] = [Sweep::Heads, Sweep::Delta, Sweep::Acceptance, Sweep::Sampling, Sweep::Variants];

    pub fn name(self) -> &'static str {
        match self {
            Sweep::Heads => "heads",
            Sweep::Delta => "delta",
            Sweep::Acceptance => "acceptance",
            Sweep::Sampling => "sampling",
            Sweep::Variants => "variants",
        }
    }
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sweep::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep `{s}`")))
    }
}

pub fn threshold_label(delta: f32) -> String {
    format!("delta={delta}")
}

pub fn top_ka_label(k: usize) -> String {
    format!("top_ka={k}")
}

pub fn pts_label(k: usize) -> String {
    format!("pts={k}")
}

/// Row labels of the head-variant comparison.
pub const VARIANT_ROWS: [&str; 5] = [VANILLA, "mlp", "mlp+lora", "ca", "ca+lora"];

/// Runs one sweep and writes `<name>.{csv,json,txt}` under the reports directory.
pub fn ablate(cfg: &RunConfig, ws: &Workspace, sweep: Sweep) -> Result<BenchRun> {
    let targets = held_out_targets(ws, cfg.bench.conditions)?;
    let base = cfg.decode.clone();
    let with = |f: &dyn Fn(&mut DecodeConfig)| {
        let mut d = base.clone();
        f(&mut d);
        d
    };
    let run = if sweep == Sweep::Variants {
        let ca1 = load_model(&ws.stage(1, HeadKind::CrossAttention), &stage_command(1, HeadKind::CrossAttention))?;
        let ca2 = final_model(ws)?;
        let mlp1 = load_model(&ws.stage(1, HeadKind::Mlp), &stage_command(1, HeadKind::Mlp))?;
        let mlp2 = load_model(&ws.stage(2, HeadKind::Mlp), &stage_command(2, HeadKind::Mlp))?;
        let mut arms = vec![Arm::vanilla(&ca1, &base)];
        for (label, m) in VARIANT_ROWS[1..].iter().zip([&mlp1, &mlp2, &ca1, &ca2]) {
            arms.push(Arm::speculative(*label, m, base.clone()));
        }
        run_arms(sweep.name(), &arms, &targets, cfg.bench.workers, cfg.bench.metric_points)?
    } else {
        let model = final_model(ws)?;
        let mut arms = vec![Arm::vanilla(&model, &base)];
        match sweep {
            Sweep::Heads => {
                for &d in &cfg.ablate.heads {
                    arms.push(Arm::speculative(format!("D={d}"), &model, with(&|c| c.draft_heads = d)));
                }
            }
            Sweep::Delta => {
                for &delta in &cfg.ablate.deltas {
                    let a = Acceptance::Threshold { delta };
                    arms.push(Arm::speculative(threshold_label(delta), &model, with(&|c| c.acceptance = a)));
                }
            }
            Sweep::Acceptance => {
                let a = Acceptance::Threshold { delta: 0.5 };
                arms.push(Arm::speculative(threshold_label(0.5), &model, with(&|c| c.acceptance = a)));
                for &k in &cfg.ablate.top_ka {
                    let a = Acceptance::TopK { k };
                    arms.push(Arm::speculative(top_ka_label(k), &model, with(&|c| c.acceptance = a)));
                }
            }
            Sweep::Sampling => {
                arms.push(Arm::speculative("independent", &model, with(&|c| c.strategy = Strategy::Independent)));
                for &k in &cfg.ablate.pts {
                    let s = Strategy::Pts { k, prune: crate::specdec::DEFAULT_PRUNE };
                    arms.push(Arm::speculative(pts_label(k), &model, with(&|c| c.strategy = s)));
                }
            }
            Sweep::Variants => unreachable!(),
        }
        run_arms(sweep.name(), &arms, &targets, cfg.bench.workers, cfg.bench.metric_points)?
    };
    emit(cfg, ws, sweep.name(), &run)?;
    Ok(run)
}
