//! Worker emulation pipeline: record a trace from a real worker, fit a
//! latency/failure model, check the model's fidelity against the
//! recording, and serve emulated workers from it.

pub mod fit;
pub mod model;
pub mod record;
pub mod replay;
pub mod trace;

use thiserror::Error;

pub use fit::{fit_model, synth_record, MIN_WARM_SAMPLES};
pub use model::{
    emulate_invoke, FunctionModel, WorkerModel, FAILURE_RATE_MIN_SAMPLES, MODEL_VERSION,
    SYNTHETIC_PAYLOAD,
};
pub use record::{record_trace, RecordSummary};
pub use replay::{
    evaluate_model, replay_trace, FidelityReport, FunctionFidelity, ReplaySettings,
    ReplayedCall, ReplayedOutcome,
};
pub use trace::{read_trace, write_trace, TraceRecord, TRACE_HEADER};

#[derive(Debug, Error)]
pub enum EmulatorError {
    /// FIT_INSUFFICIENT_DATA: not enough warm samples for a function.
    #[error("insufficient data for function {function}: {have} warm records, need {need}")]
    InsufficientData { function: String, have: usize, need: usize },
    #[error("function not covered by model: {0}")]
    Uncovered(String),
    #[error("trace error: {0}")]
    Trace(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("recording error: {0}")]
    Record(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
