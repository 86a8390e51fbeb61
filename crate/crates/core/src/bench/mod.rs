//! Run configuration, benchmark harness and report tables.

pub mod config;
pub mod harness;
pub mod report;

pub use config::{RunConfig, CONFIG_ENV, RESOLVED_FILE};
pub use harness::{
    ablate, bench, distill, final_model, gen_data, generate, held_out_targets, metric_cloud, pretrain, run_arms,
    stage_command, Arm, BenchRun, DataSummary, Sample, Sweep, Target, Workspace, VARIANT_ROWS, VANILLA,
};
pub use report::{BenchReport, BenchRow, CSV_COLUMNS};
