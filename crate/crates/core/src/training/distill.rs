use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::corpus::shape_seed;
use crate::model::Model;
use crate::par::{self, Parallelism};
use crate::specdec::{vanilla_decode, DecodeConfig};

use super::data::{read_examples, write_examples, Example};

pub const SETTINGS_FILE: &str = "distill.json";
pub const RECORDS_FILE: &str = "records.jsonl";

/// Where distillation labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Sequences sampled from the frozen backbone.
    #[default]
    Generated,
    /// The tokenized ground-truth shapes.
    Corpus,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSource::Generated => "generated",
            LabelSource::Corpus => "corpus",
        })
    }
}

impl FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generated" => Ok(LabelSource::Generated),
            "corpus" => Ok(LabelSource::Corpus),
            _ => Err(Error::Config(format!("unknown label source `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSettings {
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub seed: u64,
    pub labels: LabelSource,
}

impl Default for DistillSettings {
    fn default() -> Self {
        DistillSettings {
            temperature: 0.7,
            top_k: Some(50),
            seed: 0,
            labels: LabelSource::Generated,
        }
    }
}

/// Conditions paired with the sequences the heads are trained to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillCorpus {
    pub settings: DistillSettings,
    #[serde(skip)]
    pub records: Vec<Example>,
    /// Generations holding no body token.
    pub empty: usize,
    pub unterminated: usize,
}

impl DistillCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(SETTINGS_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        write_examples(&self.records, &dir.join(RECORDS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(SETTINGS_FILE);
        if !p.exists() {
            return Err(Error::Dependency(format!("no distillation corpus at {}", dir.display())));
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut c: DistillCorpus = serde_json::from_str(&text)?;
        c.records = read_examples(&dir.join(RECORDS_FILE))?;
        Ok(c)
    }
}

/// Builds `n` records by cycling through `conditions`; with generated
/// labels each record is one vanilla decode of the backbone.
pub fn generate_distill_corpus(
    model: &Model,
    conditions: &[Example],
    n: usize,
    settings: &DistillSettings,
    mode: Parallelism,
) -> Result<DistillCorpus> {
    if conditions.is_empty() && n > 0 {
        return Err(Error::Config("no conditions to distill from".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let out = par::map(&idx, mode, |_, &i| -> Result<(Example, bool)> {
        let src = &conditions[i % conditions.len()];
        match settings.labels {
            LabelSource::Corpus => Ok((
                Example {
                    id: i,
                    ..src.clone()
                },
                true,
            )),
            LabelSource::Generated => {
                let cfg = DecodeConfig {
                    draft_heads: 0,
                    temperature: settings.temperature,
                    top_k: settings.top_k,
                    seed: shape_seed(settings.seed, i),
                    ..Default::default()
                };
                let cond = model.encode_condition(&src.cloud())?;
                let gen = vanilla_decode(model, &cond, &cfg)?;
                Ok((
                    Example {
                        id: i,
                        points: src.points.clone(),
                        tokens: gen.tokens,
                    },
                    gen.trace.terminated,
                ))
            }
        }
    });
    let mut corpus = DistillCorpus {
        settings: settings.clone(),
        records: Vec::with_capacity(n),
        empty: 0,
        unterminated: 0,
    };
    for r in out {
        let (e, terminated) = r?;
        if e.tokens.len() <= 2 {
            corpus.empty += 1;
        }
        if !terminated {
            corpus.unterminated += 1;
        }
        corpus.records.push(e);
    }
    if corpus.empty > 0 {
        warn!("{} distillation generations are empty", corpus.empty);
    }
    info!(
        "distillation corpus: {} records ({} labels, {} unterminated)",
        corpus.len(),
        settings.labels,
        corpus.unterminated
    );
    Ok(corpus)
}
