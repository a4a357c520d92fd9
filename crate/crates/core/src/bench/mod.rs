//! Load generation, result reporting, and the topology runner that
//! turns a single config file into a running tree.

pub mod generate;
pub mod profile;
pub mod report;
pub mod topology;

use thiserror::Error;

pub use generate::{generate, read_results, write_results, CallRow, RESULTS_HEADER};
pub use profile::{ArrivalKind, LoadProfile, Pattern, Phase};
pub use report::{build_report, render_table, FunctionStats, RunReport};
pub use topology::{run_topology, NodeDecl, RunningTopology, StoresDecl, TopologyConfig};

/// Deadline stamped on generated calls; profiles do not carry one.
pub const DEFAULT_CALL_DEADLINE_MS: u64 = 30_000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("CONFIG_INVALID: {0}")]
    ConfigInvalid(String),
    #[error("target unreachable: {0}")]
    TargetUnreachable(String),
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("results error: {0}")]
    Results(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
