//! Speculative decoding with verified multi-head drafts.

pub mod decode;
pub mod rules;
pub mod sampling;
pub mod trace;

pub use decode::{
    decode, decode_prepared, provenance_violations, replay_probabilities, rollback_cache, vanilla_decode,
    vanilla_decode_prepared, DecodeConfig, DecodeOutput,
};
pub use rules::{rank, verify, Acceptance, Strategy, DEFAULT_PRUNE};
pub use sampling::{draw, pts_paths, resample_independent, resample_pts, top_indices, Sampler};
pub use trace::{compute_metrics, speedup, DecodeTrace, Iteration, MetricsReport, Provenance, WARMUP_ITERATIONS};
