//! Experiment configuration, checkpoints, pipeline orchestration, evaluation and reports.
//!
//! All randomness derives from the per-run seed through named streams
//! (`corpus`, `init`, `stage1`, `stage2`, `anchor`, `rollout`, `uapo`, `eval`),
//! so any stage can be re-run from its input checkpoint alone.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod pipeline;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{EvalConfig, ExperimentConfig, StageSchedule};
pub use metrics::{evaluate, replay_metrics, EvalRollouts, MetricsRow, Replayed, RowContext};
pub use pipeline::{
    ablate, ablate_cells, configure_threads, eval_checkpoint, grid, run_pipeline, Cell,
    PipelineOptions, SeedData, Step,
};
