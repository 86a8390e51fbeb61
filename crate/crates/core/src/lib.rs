//! Multi-head speculative decoding for autoregressive mesh-token transformers.

pub mod bench;
pub mod error;
pub mod kv;
pub mod mesh;
pub mod model;
pub mod par;
pub mod specdec;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
