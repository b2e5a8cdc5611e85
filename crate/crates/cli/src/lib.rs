//! Experiment command line: configuration, run-directory layout and the
//! prepare/train/eval/explain/plot pipeline.

pub mod config;
pub mod pipeline;
pub mod plots;
pub mod run_dir;

pub use config::ExperimentConfig;
pub use run_dir::RunDir;

use histo_core::HistoError;

/// 1 for user errors (bad input, missing artifacts), 2 for internal failures.
pub fn exit_code(e: &HistoError) -> i32 {
    if e.is_user_error() {
        1
    } else {
        2
    }
}
