//! Building blocks for a composable Function-as-a-Service testbed.
//!
//! The platform is a tree of nodes that all speak one call interface:
//! balancers forward requests down the tree, leaf balancers route to
//! worker nodes using worker state, and workers run function instances
//! on demand under a configurable within-instance concurrency policy.
//!
//! For experiments where real execution is not needed, a worker can be
//! swapped for an emulated one: record a trace from a real worker, fit
//! a latency/failure model to it, and serve many cheap model-backed
//! workers with the same external behavior.
//!
//! Module map:
//! - [`protocol`]: domain types, the framed wire format, and transports
//!   (in-process handles and TCP).
//! - [`balancer`]: tree nodes with pluggable routing strategies.
//! - [`worker`]: instance lifecycle, admission policies, runtimes.
//! - [`registry`]: content-addressed image store and config store.
//! - [`emulator`]: trace recording, model fitting, fidelity evaluation,
//!   and the model-backed runtime.
//! - [`bench`]: load generation, result reporting, and topology runner.

pub mod balancer;
pub mod bench;
pub mod emulator;
pub mod protocol;
pub mod registry;
pub mod util;
pub mod worker;

pub use protocol::types::{
    CallOutcome, CallRequest, CallResponse, ConcurrencyMode, ErrorCode, FunctionConfig,
    FunctionId, InstanceSnapshot, InstanceStatus, StopRequest, StopTarget, WorkerSnapshot,
};
pub use protocol::transport::{NodeHandle, TransportError};
