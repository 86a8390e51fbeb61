use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_head_param, is_lora_param, Memory, Model};
use crate::par;
use crate::tensor::optim::global_grad_norm;
use crate::tensor::{clip_global_norm, AdamW, CosineSchedule, Gradients, Graph, Module, Parameter, Tensor};

use super::config::{Stage, TrainConfig};
use super::data::Example;
use super::loss::{labelled, shifted_labels};

/// One optimizer step as written to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub lr: f32,
    pub loss: f64,
    /// Position-mean next-token CE; absent in stage 1.
    pub backbone_loss: Option<f64>,
    /// Position-mean CE of each draft head.
    pub head_losses: Vec<f64>,
    pub mhd_loss: Option<f64>,
    pub grad_norm: f64,
    pub clip_factor: f32,
}

/// Step records kept in memory and optionally streamed as JSON lines.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    writer: Option<(PathBuf, BufWriter<File>)>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        TrainLog::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(TrainLog {
            records: Vec::new(),
            writer: Some((path.to_path_buf(), BufWriter::new(f))),
        })
    }

    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.writer {
            let path = path.as_path();
            serde_json::to_writer(&mut *w, &r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        self.records.push(r);
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub steps: usize,
    pub examples: usize,
    pub skipped: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Hash of every selected parameter's name, shape and bits.
pub fn param_hash(model: &Model, keep: impl Fn(&str) -> bool) -> u64 {
    let mut h = DefaultHasher::new();
    for p in model.params() {
        if keep(&p.name) {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for x in p.value.data() {
                x.to_bits().hash(&mut h);
            }
        }
    }
    h.finish()
}

fn is_base_param(name: &str) -> bool {
    !is_head_param(name) && !is_lora_param(name)
}

fn trainable_in(stage: Stage) -> fn(&str) -> bool {
    match stage {
        Stage::Pretrain => is_base_param,
        Stage::Stage1 => is_head_param,
        Stage::Stage2 => |n| is_head_param(n) || is_lora_param(n),
    }
}

/// Inputs of one example, with whatever the frozen parts already computed.
struct Item<'e> {
    tokens: &'e [u32],
    points: Option<Tensor>,
    memory: Option<Tensor>,
    hidden: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
struct Parts {
    total: f64,
    backbone: f64,
    heads: Vec<f64>,
}

impl Parts {
    fn add(&mut self, o: &Parts) {
        self.total += o.total;
        self.backbone += o.backbone;
        if self.heads.len() < o.heads.len() {
            self.heads.resize(o.heads.len(), 0.0);
        }
        for (a, b) in self.heads.iter_mut().zip(&o.heads) {
            *a += b;
        }
    }
}

/// Per-term CE scales: one over the labelled count of each output in the batch.
struct Scales {
    backbone: f32,
    heads: Vec<f32>,
}

fn inv(n: usize) -> f32 {
    if n == 0 {
        0.0
    } else {
        1.0 / n as f32
    }
}

fn item_loss(model: &Model, cfg: &TrainConfig, heads: usize, item: &Item, scales: &Scales) -> Result<(Gradients, Parts)> {
    let stage = cfg.stage;
    let rows = item.tokens.len();
    let mut g = Graph::new();
    let mut terms = Vec::new();
    let mut backbone = None;
    let (hidden, memory) = match (stage, &item.hidden, &item.memory) {
        (Stage::Stage1, Some(h), Some(m)) => (g.constant(h), g.constant(m)),
        (Stage::Stage1, _, _) => return Err(Error::State("stage 1 needs precomputed hidden states".into())),
        _ => {
            let memory = match (&item.memory, &item.points) {
                (Some(m), _) => g.constant(m),
                (None, Some(p)) => {
                    let p = g.constant(p);
                    model.encode_graph(&mut g, p)?
                }
                (None, None) => return Err(Error::State("example has neither points nor memory".into())),
            };
            let t = model.trunk(&mut g, item.tokens, 0, Memory::Var(memory), None)?;
            let labels = shifted_labels(item.tokens, 0, rows);
            if labelled(&labels) > 0 {
                let ce = g.cross_entropy(t.logits, &labels, scales.backbone)?;
                let w = if stage == Stage::Stage2 { cfg.lambda } else { 1.0 };
                terms.push((ce, w));
                backbone = Some(ce);
            }
            (t.hidden, memory)
        }
    };
    let mut head_vars = Vec::new();
    if stage != Stage::Pretrain {
        for d in 1..=heads {
            let labels = shifted_labels(item.tokens, d, rows);
            if labelled(&labels) == 0 {
                head_vars.push(None);
                continue;
            }
            let logits = model.head_graph(&mut g, d, hidden, Memory::Var(memory))?;
            let ce = g.cross_entropy(logits, &labels, scales.heads[d - 1])?;
            terms.push((ce, cfg.head_weight(d)));
            head_vars.push(Some(ce));
        }
    }
    if terms.is_empty() {
        return Ok((Gradients::default(), Parts::default()));
    }
    let total = g.weighted_sum(&terms)?;
    let grads = g.backward(total)?;
    let val = |v| g.value(v).data()[0] as f64;
    let parts = Parts {
        total: val(total),
        backbone: backbone.map(val).unwrap_or(0.0),
        heads: head_vars.iter().map(|v| v.map(val).unwrap_or(0.0)).collect(),
    };
    Ok((grads, parts))
}

fn run_stage(model: &mut Model, items: &[Item], cfg: &TrainConfig, log: &mut TrainLog) -> Result<StageSummary> {
    let stage = cfg.stage;
    let heads = if stage == Stage::Pretrain { 0 } else { model.heads.len() };
    let trainable = trainable_in(stage);
    model.set_trainable(trainable);
    let per_epoch = items.len().div_ceil(cfg.batch_size);
    let sched = CosineSchedule::new(cfg.lr_start, cfg.lr_end, cfg.epochs * per_epoch);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (stage as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut summary = StageSummary {
        examples: items.len(),
        ..Default::default()
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Item> = chunk.iter().map(|&i| &items[i]).collect();
            let count = |head: usize| -> usize {
                batch
                    .iter()
                    .map(|it| it.tokens.len().saturating_sub(head + 1))
                    .sum()
            };
            let scales = Scales {
                backbone: inv(count(0)),
                heads: (1..=heads).map(|d| inv(count(d))).collect(),
            };
            let shared: &Model = model;
            let results = par::map(&batch, cfg.parallelism, |_, it| item_loss(shared, cfg, heads, it, &scales));
            let mut grads = Gradients::default();
            let mut parts = Parts::default();
            for r in results {
                let (g, p) = r?;
                grads.merge(g);
                parts.add(&p);
            }
            if let Some((name, _)) = grads.params().find(|(n, _)| !trainable(n)) {
                return Err(Error::State(format!(
                    "frozen parameter `{name}` received a gradient in {stage}"
                )));
            }
            model.zero_grad();
            grads.accumulate_into(model.params_mut());
            let mut params: Vec<&mut Parameter> = model.params_mut().into_iter().filter(|p| p.trainable).collect();
            let grad_norm = global_grad_norm(&params);
            let clip_factor = clip_global_norm(&mut params, cfg.clip);
            let lr = sched.lr(step);
            opt.step(&mut params, lr);

            let head_losses = parts.heads.clone();
            let mhd = super::loss::mhd_loss(&head_losses, cfg.head_weight_base);
            if stage == Stage::Stage2 {
                let expect = cfg.lambda as f64 * parts.backbone + mhd;
                if (parts.total - expect).abs() > 1e-6 * parts.total.abs().max(1.0) {
                    return Err(Error::State(format!(
                        "loss decomposition drifted: total {} vs {}",
                        parts.total, expect
                    )));
                }
            }
            if !parts.total.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            if step == 0 {
                summary.first_loss = parts.total;
            }
            summary.final_loss = parts.total;
            log.push(StepRecord {
                stage,
                epoch,
                step,
                lr,
                loss: parts.total,
                backbone_loss: (stage != Stage::Stage1).then_some(parts.backbone),
                head_losses,
                mhd_loss: (stage != Stage::Pretrain).then_some(mhd),
                grad_norm,
                clip_factor,
            })?;
            step += 1;
        }
        info!("{stage} epoch {} loss {:.4}", epoch + 1, summary.final_loss);
    }
    model.zero_grad();
    summary.steps = step;
    Ok(summary)
}

fn fitting<'e>(model: &Model, examples: &'e [Example]) -> (Vec<&'e Example>, usize) {
    let (keep, drop): (Vec<&Example>, Vec<&Example>) = examples
        .iter()
        .partition(|e| e.tokens.len() <= model.cfg.max_len);
    if !drop.is_empty() {
        warn!(
            "skipped {} sequences longer than {} tokens",
            drop.len(),
            model.cfg.max_len
        );
    }
    (keep, drop.len())
}

fn check_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config(format!("{} config passed to {stage}", cfg.stage)));
    }
    Ok(())
}

/// Teacher-forced next-token training of encoder, trunk and output projection.
pub fn pretrain_backbone(model: &mut Model, examples: &[Example], cfg: &TrainConfig, log: &mut TrainLog) -> Result<StageSummary> {
    check_stage(cfg, Stage::Pretrain)?;
    let (keep, skipped) = fitting(model, examples);
    let items = keep
        .iter()
        .map(|e| {
            Ok(Item {
                tokens: &e.tokens,
                points: Some(e.points_tensor()?),
                memory: None,
                hidden: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = run_stage(model, &items, cfg, log)?;
    s.skipped = skipped;
    Ok(s)
}

fn frozen_features(model: &Model, keep: &[&Example], cfg: &TrainConfig, with_hidden: bool) -> Result<Vec<(Tensor, Option<Tensor>)>> {
    par::map(keep, cfg.parallelism, |_, e| -> Result<(Tensor, Option<Tensor>)> {
        let memory = model.encode_condition(&e.cloud())?.memory;
        let hidden = if with_hidden {
            let mut g = Graph::inference();
            let m = g.constant(&memory);
            let t = model.trunk(&mut g, &e.tokens, 0, Memory::Var(m), None)?;
            Some(g.value(t.hidden).clone())
        } else {
            None
        };
        Ok((memory, hidden))
    })
    .into_iter()
    .collect()
}

/// Trains the draft heads on frozen backbone features.
pub fn train_heads_stage1(model: &mut Model, corpus: &[Example], cfg: &TrainConfig, log: &mut TrainLog) -> Result<StageSummary> {
    check_stage(cfg, Stage::Stage1)?;
    if model.heads.is_empty() {
        return Err(Error::Config("model has no draft heads to train".into()));
    }
    let before = param_hash(model, |n| !is_head_param(n));
    let (keep, skipped) = fitting(model, corpus);
    let feats = frozen_features(model, &keep, cfg, true)?;
    let items: Vec<Item> = keep
        .iter()
        .zip(feats)
        .map(|(e, (m, h))| Item {
            tokens: &e.tokens,
            points: None,
            memory: Some(m),
            hidden: h,
        })
        .collect();
    let mut s = run_stage(model, &items, cfg, log)?;
    if param_hash(model, |n| !is_head_param(n)) != before {
        return Err(Error::State("backbone parameters changed during stage 1".into()));
    }
    s.skipped = skipped;
    Ok(s)
}

/// Attaches adapters (if absent) and trains them jointly with the heads
/// under `λ·backbone + Σ w(d)·head`. The adapters stay attached.
pub fn train_joint_stage2(model: &mut Model, corpus: &[Example], cfg: &TrainConfig, log: &mut TrainLog) -> Result<StageSummary> {
    check_stage(cfg, Stage::Stage2)?;
    if model.heads.is_empty() {
        return Err(Error::Config("model has no draft heads to train".into()));
    }
    if !model.has_lora() {
        let n = model.attach_lora(cfg.lora_rank, cfg.lora_alpha, cfg.lora_targets, cfg.seed ^ 0x4c6f_5241)?;
        info!("attached {n} LoRA adapters (rank {}, alpha {})", cfg.lora_rank, cfg.lora_alpha);
    }
    let before = param_hash(model, is_base_param);
    let (keep, skipped) = fitting(model, corpus);
    let feats = frozen_features(model, &keep, cfg, false)?;
    let items: Vec<Item> = keep
        .iter()
        .zip(feats)
        .map(|(e, (m, _))| Item {
            tokens: &e.tokens,
            points: None,
            memory: Some(m),
            hidden: None,
        })
        .collect();
    let mut s = run_stage(model, &items, cfg, log)?;
    if param_hash(model, is_base_param) != before {
        return Err(Error::State("base weights changed during stage 2".into()));
    }
    s.skipped = skipped;
    Ok(s)
}
