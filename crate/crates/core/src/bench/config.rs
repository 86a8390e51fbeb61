use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::mesh::{CorpusSpec, Family};
use crate::model::config::MODEL_KEYS;
use crate::model::ModelConfig;
use crate::par::Parallelism;
use crate::specdec::{Acceptance, DecodeConfig, Strategy};
use crate::training::{DistillSettings, LabelSource, Stage, TrainConfig};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "MESHDRAFT_CONFIG";
/// Name of the resolved config echoed into every output directory.
pub const RESOLVED_FILE: &str = "run.cfg";

const TRAIN_KEYS: [&str; 12] = [
    "epochs",
    "batch_size",
    "lr_start",
    "lr_end",
    "head_weight_base",
    "lambda",
    "clip",
    "weight_decay",
    "seed",
    "lora_rank",
    "lora_alpha",
    "lora_targets",
];

const OTHER_KEYS: [&str; 23] = [
    "corpus.count",
    "corpus.seed",
    "corpus.families",
    "corpus.held_out",
    "distill.count",
    "distill.temperature",
    "distill.top_k",
    "distill.seed",
    "distill.labels",
    "decode.draft_heads",
    "decode.acceptance",
    "decode.strategy",
    "decode.temperature",
    "decode.top_k",
    "decode.seed",
    "bench.conditions",
    "bench.workers",
    "bench.metric_points",
    "ablate.heads",
    "ablate.deltas",
    "ablate.top_ka",
    "ablate.pts",
    "run.parallel",
];

/// Comma-separated list value, e.g. `0.1,0.3,0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse()
                    .map_err(|_| Error::Config(format!("bad list element `{p}`")))
            })
            .collect::<Result<Vec<T>>>()
            .map(List)
    }
}

impl<T: std::fmt::Display> std::fmt::Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|x| x.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// `none` or a number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Opt(pub Option<usize>);

impl FromStr for Opt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Opt(None));
        }
        s.parse()
            .map(|v| Opt(Some(v)))
            .map_err(|_| Error::Config(format!("expected a count or `none`, got `{s}`")))
    }
}

impl std::fmt::Display for Opt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("none"),
        }
    }
}

/// Family weights written `box:2,prism:1`; a bare name weighs 1.
pub fn parse_mix(s: &str) -> Result<Vec<(Family, f64)>> {
    let mix = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (name, w) = p.split_once(':').unwrap_or((p, "1"));
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad family weight in `{p}`")))?;
            Ok((name.trim().parse::<Family>()?, w))
        })
        .collect::<Result<Vec<_>>>()?;
    if mix.is_empty() {
        return Err(Error::Config("empty family mix".into()));
    }
    Ok(mix)
}

pub fn mix_text(mix: &[(Family, f64)]) -> String {
    mix.iter()
        .map(|(f, w)| format!("{}:{w}", f.name()))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    /// Held-out conditions decoded per report.
    pub conditions: usize,
    /// Decode streams run at once; 1 gives clean timings.
    pub workers: usize,
    pub metric_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub heads: Vec<usize>,
    pub deltas: Vec<f32>,
    pub top_ka: Vec<usize>,
    pub pts: Vec<usize>,
}

/// Every knob of the pipeline, read from flat `section.key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    /// Shapes kept out of training for evaluation and benchmarking.
    pub held_out: usize,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub distill_count: usize,
    pub distill: DistillSettings,
    pub decode: DecodeConfig,
    pub bench: BenchSettings,
    pub ablate: AblationGrid,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut pretrain = TrainConfig::for_stage(Stage::Pretrain);
        pretrain.epochs = 6;
        RunConfig {
            corpus: CorpusSpec {
                count: 1250,
                seed: 7,
                mix: vec![(Family::Box, 1.0)],
            },
            held_out: 50,
            model: ModelConfig {
                blocks: 4,
                d_model: 128,
                attn_heads: 4,
                ffn: 512,
                bins: 64,
                max_len: 128,
                draft_heads: 6,
                cond_points: 64,
                ..ModelConfig::default()
            },
            pretrain,
            stage1: TrainConfig::for_stage(Stage::Stage1),
            stage2: TrainConfig::for_stage(Stage::Stage2),
            distill_count: 1000,
            distill: DistillSettings::default(),
            decode: DecodeConfig {
                temperature: 0.7,
                ..DecodeConfig::default()
            },
            bench: BenchSettings {
                conditions: 50,
                workers: 1,
                metric_points: crate::mesh::METRIC_POINTS,
            },
            ablate: AblationGrid {
                heads: (1..=6).collect(),
                deltas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
                top_ka: vec![1, 3, 5, 10],
                pts: vec![1, 2, 3, 4],
            },
            parallel: true,
        }
    }
}

fn all_keys() -> Vec<String> {
    let mut keys: Vec<String> = OTHER_KEYS.iter().map(|k| k.to_string()).collect();
    keys.extend(MODEL_KEYS.iter().map(|k| format!("model.{k}")));
    for s in ["pretrain", "stage1", "stage2"] {
        keys.extend(TRAIN_KEYS.iter().map(|k| format!("{s}.{k}")));
    }
    keys
}

fn read_train(kv: &KvMap, prefix: &str, c: &mut TrainConfig) -> Result<()> {
    let k = |s: &str| format!("{prefix}.{s}");
    kv.read_into(&k("epochs"), &mut c.epochs)?;
    kv.read_into(&k("batch_size"), &mut c.batch_size)?;
    kv.read_into(&k("lr_start"), &mut c.lr_start)?;
    kv.read_into(&k("lr_end"), &mut c.lr_end)?;
    kv.read_into(&k("head_weight_base"), &mut c.head_weight_base)?;
    kv.read_into(&k("lambda"), &mut c.lambda)?;
    kv.read_into(&k("clip"), &mut c.clip)?;
    kv.read_into(&k("weight_decay"), &mut c.weight_decay)?;
    kv.read_into(&k("seed"), &mut c.seed)?;
    kv.read_into(&k("lora_rank"), &mut c.lora_rank)?;
    kv.read_into(&k("lora_alpha"), &mut c.lora_alpha)?;
    kv.read_into(&k("lora_targets"), &mut c.lora_targets)?;
    c.validate()
}

fn write_train(kv: &mut KvMap, prefix: &str, c: &TrainConfig) {
    kv.set(format!("{prefix}.epochs"), c.epochs);
    kv.set(format!("{prefix}.batch_size"), c.batch_size);
    kv.set(format!("{prefix}.lr_start"), c.lr_start);
    kv.set(format!("{prefix}.lr_end"), c.lr_end);
    kv.set(format!("{prefix}.head_weight_base"), c.head_weight_base);
    kv.set(format!("{prefix}.lambda"), c.lambda);
    kv.set(format!("{prefix}.clip"), c.clip);
    kv.set(format!("{prefix}.weight_decay"), c.weight_decay);
    kv.set(format!("{prefix}.seed"), c.seed);
    kv.set(format!("{prefix}.lora_rank"), c.lora_rank);
    kv.set(format!("{prefix}.lora_alpha"), c.lora_alpha);
    kv.set(format!("{prefix}.lora_targets"), c.lora_targets);
}

impl RunConfig {
    /// Defaults overlaid with `kv`; unknown keys are rejected.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let keys = all_keys();
        let refs: Vec<&str> = keys.iter().map(String::as_str).collect();
        kv.reject_unknown(&refs)?;
        let mut c = RunConfig::default();
        kv.read_into("corpus.count", &mut c.corpus.count)?;
        kv.read_into("corpus.seed", &mut c.corpus.seed)?;
        if let Some(m) = kv.get_raw("corpus.families") {
            c.corpus.mix = parse_mix(m)?;
        }
        kv.read_into("corpus.held_out", &mut c.held_out)?;
        let mut model_kv = KvMap::default();
        c.model.write_kv(&mut model_kv, "model.");
        for k in kv.keys().filter(|k| k.starts_with("model.")) {
            model_kv.set(k, kv.get_raw(k).unwrap_or_default());
        }
        c.model = ModelConfig::from_kv(&model_kv, "model.")?;
        read_train(kv, "pretrain", &mut c.pretrain)?;
        read_train(kv, "stage1", &mut c.stage1)?;
        read_train(kv, "stage2", &mut c.stage2)?;
        kv.read_into("distill.count", &mut c.distill_count)?;
        kv.read_into("distill.temperature", &mut c.distill.temperature)?;
        let mut top_k = Opt(c.distill.top_k);
        kv.read_into("distill.top_k", &mut top_k)?;
        c.distill.top_k = top_k.0;
        kv.read_into("distill.seed", &mut c.distill.seed)?;
        kv.read_into::<LabelSource>("distill.labels", &mut c.distill.labels)?;
        kv.read_into("decode.draft_heads", &mut c.decode.draft_heads)?;
        kv.read_into::<Acceptance>("decode.acceptance", &mut c.decode.acceptance)?;
        kv.read_into::<Strategy>("decode.strategy", &mut c.decode.strategy)?;
        kv.read_into("decode.temperature", &mut c.decode.temperature)?;
        let mut top_k = Opt(c.decode.top_k);
        kv.read_into("decode.top_k", &mut top_k)?;
        c.decode.top_k = top_k.0;
        kv.read_into("decode.seed", &mut c.decode.seed)?;
        kv.read_into("bench.conditions", &mut c.bench.conditions)?;
        kv.read_into("bench.workers", &mut c.bench.workers)?;
        kv.read_into("bench.metric_points", &mut c.bench.metric_points)?;
        let mut heads = List(c.ablate.heads.clone());
        kv.read_into("ablate.heads", &mut heads)?;
        c.ablate.heads = heads.0;
        let mut deltas = List(c.ablate.deltas.clone());
        kv.read_into("ablate.deltas", &mut deltas)?;
        c.ablate.deltas = deltas.0;
        let mut top_ka = List(c.ablate.top_ka.clone());
        kv.read_into("ablate.top_ka", &mut top_ka)?;
        c.ablate.top_ka = top_ka.0;
        let mut pts = List(c.ablate.pts.clone());
        kv.read_into("ablate.pts", &mut pts)?;
        c.ablate.pts = pts.0;
        kv.read_into("run.parallel", &mut c.parallel)?;
        c.apply_parallelism();
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text)?)
    }

    /// Reads `path`, then applies `overrides` (dotted keys) on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut kv = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                KvMap::parse(&text)?
            }
            None => KvMap::default(),
        };
        for (k, v) in overrides {
            kv.set(k.clone(), v);
        }
        Self::from_kv(&kv)
    }

    fn apply_parallelism(&mut self) {
        let mode = self.parallelism();
        self.pretrain.parallelism = mode;
        self.stage1.parallelism = mode;
        self.stage2.parallelism = mode;
    }

    pub fn parallelism(&self) -> Parallelism {
        if self.parallel {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.family_counts()?;
        if self.held_out >= self.corpus.count {
            return Err(Error::Config(format!(
                "held_out {} leaves no training shapes out of {}",
                self.held_out, self.corpus.count
            )));
        }
        self.model.validate()?;
        if self.pretrain.stage != Stage::Pretrain || self.stage1.stage != Stage::Stage1 || self.stage2.stage != Stage::Stage2 {
            return Err(Error::Config("training sections mixed up".into()));
        }
        self.decode.acceptance.validate()?;
        self.decode.strategy.validate()?;
        if self.decode.draft_heads > self.model.draft_heads {
            return Err(Error::Config(format!(
                "decode.draft_heads {} exceeds model.draft_heads {}",
                self.decode.draft_heads, self.model.draft_heads
            )));
        }
        if self.bench.conditions == 0 || self.bench.workers == 0 || self.bench.metric_points == 0 {
            return Err(Error::Config("bench sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("corpus.count", self.corpus.count);
        kv.set("corpus.seed", self.corpus.seed);
        kv.set("corpus.families", mix_text(&self.corpus.mix));
        kv.set("corpus.held_out", self.held_out);
        self.model.write_kv(&mut kv, "model.");
        write_train(&mut kv, "pretrain", &self.pretrain);
        write_train(&mut kv, "stage1", &self.stage1);
        write_train(&mut kv, "stage2", &self.stage2);
        kv.set("distill.count", self.distill_count);
        kv.set("distill.temperature", self.distill.temperature);
        kv.set("distill.top_k", Opt(self.distill.top_k));
        kv.set("distill.seed", self.distill.seed);
        kv.set("distill.labels", self.distill.labels);
        kv.set("decode.draft_heads", self.decode.draft_heads);
        kv.set("decode.acceptance", &self.decode.acceptance);
        kv.set("decode.strategy", &self.decode.strategy);
        kv.set("decode.temperature", self.decode.temperature);
        kv.set("decode.top_k", Opt(self.decode.top_k));
        kv.set("decode.seed", self.decode.seed);
        kv.set("bench.conditions", self.bench.conditions);
        kv.set("bench.workers", self.bench.workers);
        kv.set("bench.metric_points", self.bench.metric_points);
        kv.set("ablate.heads", List(self.ablate.heads.clone()));
        kv.set("ablate.deltas", List(self.ablate.deltas.clone()));
        kv.set("ablate.top_ka", List(self.ablate.top_ka.clone()));
        kv.set("ablate.pts", List(self.ablate.pts.clone()));
        kv.set("run.parallel", self.parallel);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    /// Writes the resolved config, version and seeds into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = format!(
            "# meshdraft {}\n# seeds: corpus {} pretrain {} stage1 {} stage2 {} distill {} decode {}\n",
            version(),
            self.corpus.seed,
            self.pretrain.seed,
            self.stage1.seed,
            self.stage2.seed,
            self.distill.seed,
            self.decode.seed
        );
        text.push_str(&self.to_text());
        let p = dir.join(RESOLVED_FILE);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Crate version plus the git description when the build saw one.
pub fn version() -> String {
    match option_env!("MESHDRAFT_GIT_DESCRIBE") {
        Some(g) if !g.is_empty() => format!("{} ({g})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}
