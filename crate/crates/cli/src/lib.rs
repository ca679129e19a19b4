//! Library behind the `unlearn` binary: experiment configuration, the stage
//! pipeline, and manifest bookkeeping.

pub mod config;
pub mod manifest;
pub mod pipeline;

use unlearn_core::CoreError;

/// Exit-code classes: 2 usage (argument parsing), 3 validation,
/// 4 pipeline order, 5 numeric failure.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_PIPELINE: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

/// Maps an error to its exit-code class.
pub fn exit_code(err: &CoreError) -> i32 {
    if pipeline::is_pipeline_order(err) {
        return EXIT_PIPELINE;
    }
    match err {
        CoreError::NonFiniteLoss { .. }
        | CoreError::MemorizationFailure { .. }
        | CoreError::DegenerateDistribution(_)
        | CoreError::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}
