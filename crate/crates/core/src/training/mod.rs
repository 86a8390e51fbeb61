//! Backbone pretraining, distillation corpus generation and the two head
//! training stages.

pub mod config;
pub mod data;
pub mod distill;
pub mod evaluate;
pub mod loss;
pub mod trainer;

pub use config::{Stage, TrainConfig};
pub use data::{build_examples, condition_seed, read_examples, write_examples, Example};
pub use distill::{generate_distill_corpus, DistillCorpus, DistillSettings, LabelSource};
pub use evaluate::{evaluate_heads, HeadAccuracy, HeadEval};
pub use loss::{head_loss, head_weight, mhd_loss, shifted_labels};
pub use trainer::{
    param_hash, pretrain_backbone, train_heads_stage1, train_joint_stage2, StageSummary, StepRecord, TrainLog,
};
