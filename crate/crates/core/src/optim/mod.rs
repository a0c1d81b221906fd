//! Optimisers, the step-size adapter and the tuning loops.

pub mod adapter;
pub mod optimizers;
pub mod trace;
pub mod tuning;

pub use adapter::StepSizeAdapter;
pub use optimizers::{clip_global_norm, OptMethod, OptState, OptimizerSpec};
pub use trace::{TraceRow, TuningTrace, TRACE_HEADER};
pub use tuning::{
    impdiff_run, soul_run, sosmc_run, CheckpointFn, CheckpointValues, Method, Objective, TuningConfig, TuningFailure,
    TuningOutcome, TuningResult,
};
