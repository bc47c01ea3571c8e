//! Synthetic teacher-student fine-tuning runs.
//!
//! A pretrained `W₀` with a conditioned spectrum is shifted to a teacher
//! `W* = W₀ + Δ`, where each column block of `Δ` sits inside, outside, or
//! across the column space of the matching block of `W₀`. Every method
//! starts from `W₀` and minimizes the mean squared error on 80% of the
//! samples, full batch; the rest is held out.

mod config;
mod run;
mod task;

pub use config::{
    default_lr, parse_config_file, ConfigFile, ExperimentConfig, MethodSpec, OptimizerKind, OptimizerSpec, OutputSpec,
    ShiftMode, SuiteConfig, TaskSpec, SCHEMA_VERSION,
};
pub use run::{compare, compare_csv, run, write_run, CompareRow, LossFloors, RunLog, Snapshot, StepRecord};
pub use task::{make_task, Split, Task};
