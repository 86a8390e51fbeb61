use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LoraTargets;
use crate::par::Parallelism;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "stage1" | "1" => Ok(Stage::Stage1),
            "stage2" | "2" => Ok(Stage::Stage2),
            _ => Err(Error::Config(format!("unknown training stage `{s}`"))),
        }
    }
}

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f32,
    pub lr_end: f32,
    /// Head `d` is weighted by `head_weight_base^d`.
    pub head_weight_base: f32,
    /// Weight of the backbone term in stage 2.
    pub lambda: f32,
    pub clip: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub lora_targets: LoraTargets,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (epochs, lr_start, lr_end) = match stage {
            Stage::Pretrain => (30, 1e-3, 1e-4),
            Stage::Stage1 => (30, 5e-4, 5e-5),
            Stage::Stage2 => (10, 1e-4, 1e-5),
        };
        TrainConfig {
            stage,
            epochs,
            batch_size: 16,
            lr_start,
            lr_end,
            head_weight_base: 0.8,
            lambda: 50.0,
            clip: 1.0,
            weight_decay: 0.01,
            seed: 0,
            lora_rank: 16,
            lora_alpha: 32.0,
            lora_targets: LoraTargets::All,
            parallelism: Parallelism::Parallel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be positive", self.lambda)));
        }
        if !(self.head_weight_base > 0.0 && self.head_weight_base <= 1.0) {
            return Err(Error::Config(format!(
                "head weight base {} outside (0, 1]",
                self.head_weight_base
            )));
        }
        if !(self.lr_start >= 0.0 && self.lr_end >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip {} must be positive", self.clip)));
        }
        if self.stage == Stage::Stage2 && (self.lora_rank == 0 || !(self.lora_alpha > 0.0)) {
            return Err(Error::Config("stage 2 needs a positive LoRA rank and alpha".into()));
        }
        Ok(())
    }

    pub fn head_weight(&self, d: usize) -> f32 {
        super::loss::head_weight(self.head_weight_base, d)
    }
}
