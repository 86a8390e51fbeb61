//! Conditional mesh-token transformer, draft heads and adapters.

pub mod cache;
pub mod config;
pub mod heads;
pub mod layers;
pub mod net;

pub use cache::KvCache;
pub use config::{HeadKind, LoraTargets, ModelConfig};
pub use heads::{DraftHead, HeadBody};
pub use layers::{Linear, Lora, Norm};
pub use net::{
    is_head_param, is_lora_param, predicted_position, Condition, Memory, Model, PreparedCondition, Trunk,
    WindowOut, CHECKPOINT_FILE, CONFIG_FILE,
};
