//! Domain types shared by balancers, leaves, workers, and the tooling
//! around them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum call payload size in bytes.
pub const MAX_PAYLOAD_BYTES: usize = 8 * 1024 * 1024;

/// Validation failure for a domain type.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid {what}: {reason}")]
pub struct InvalidField {
    pub what: &'static str,
    pub reason: String,
}

fn invalid(what: &'static str, reason: impl Into<String>) -> InvalidField {
    InvalidField { what, reason: reason.into() }
}

/// Name under which a function's config and image are resolved.
///
/// Canonical lowercase, `[a-z0-9-]+`, at most 128 bytes. Equality is byte
/// equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct FunctionId(String);

impl FunctionId {
    pub fn new(name: impl Into<String>) -> Result<Self, InvalidField> {
        let name = name.into();
        if name.is_empty() {
            return Err(invalid("function id", "empty"));
        }
        if name.len() > 128 {
            return Err(invalid("function id", "longer than 128 bytes"));
        }
        if !name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-') {
            return Err(invalid("function id", format!("{name:?} not matching [a-z0-9-]+")));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for FunctionId {
    type Err = InvalidField;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl<'de> Deserialize<'de> for FunctionId {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        FunctionId::new(s).map_err(serde::de::Error::custom)
    }
}

/// How many requests may execute inside one function instance at once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ConcurrencyMode {
    /// At most one request per instance.
    Single,
    /// At most `limit` requests per instance.
    HardLimit { limit: u32 },
    /// No per-instance cap; replicas are added when resource use stays
    /// above `util_threshold`, checked every `check_interval_ms`.
    Unlimited { util_threshold: f64, check_interval_ms: u64 },
}

impl ConcurrencyMode {
    /// Per-instance admission cap, `None` for unlimited.
    ///
    /// `HardLimit { limit: 1 }` and `Single` are the same policy.
    pub fn admission_limit(&self) -> Option<u32> {
        match self {
            ConcurrencyMode::Single => Some(1),
            ConcurrencyMode::HardLimit { limit } => Some(*limit),
            ConcurrencyMode::Unlimited { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), InvalidField> {
        match self {
            ConcurrencyMode::Single => Ok(()),
            ConcurrencyMode::HardLimit { limit } => {
                if *limit == 0 {
                    Err(invalid("concurrency", "hard limit must be positive"))
                } else {
                    Ok(())
                }
            }
            ConcurrencyMode::Unlimited { util_threshold, check_interval_ms } => {
                if !(*util_threshold > 0.0 && *util_threshold <= 1.0) {
                    Err(invalid("concurrency", "util_threshold must be in (0, 1]"))
                } else if *check_interval_ms == 0 {
                    Err(invalid("concurrency", "check_interval_ms must be positive"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Per-function deployment record kept in the config store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionConfig {
    pub function: FunctionId,
    /// Lowercase hex SHA-256 of the function image blob.
    pub image_digest: String,
    pub memory_limit_mb: u64,
    /// CPU limit in milli-cores.
    pub cpu_millis: u64,
    pub concurrency: ConcurrencyMode,
    /// Idle instances are stopped after this long without a completion.
    pub idle_timeout_ms: u64,
    /// Per-invocation execution deadline.
    pub exec_deadline_ms: u64,
}

pub fn is_valid_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl FunctionConfig {
    pub fn validate(&self) -> Result<(), InvalidField> {
        if !is_valid_digest(&self.image_digest) {
            return Err(invalid("image_digest", "must be 64 lowercase hex chars"));
        }
        if self.memory_limit_mb == 0
            || self.cpu_millis == 0
            || self.idle_timeout_ms == 0
            || self.exec_deadline_ms == 0
        {
            return Err(invalid("function config", "numeric fields must be positive"));
        }
        self.concurrency.validate()
    }
}

/// One function call travelling down the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRequest {
    /// 16 random bytes, hex encoded. Unique per client session.
    pub call_id: String,
    pub function: FunctionId,
    pub payload: Vec<u8>,
    /// Remaining time budget for the whole call.
    pub deadline_ms: u64,
}

impl CallRequest {
    pub fn new(function: FunctionId, payload: Vec<u8>, deadline_ms: u64, rng: &mut impl Rng) -> Self {
        Self { call_id: new_call_id(rng), function, payload, deadline_ms }
    }

    pub fn validate(&self) -> Result<(), InvalidField> {
        if self.call_id.len() != 32 || !self.call_id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(invalid("call_id", "must be 32 hex chars (16 bytes)"));
        }
        if self.payload.len() > MAX_PAYLOAD_BYTES {
            return Err(invalid("payload", format!("{} bytes exceeds 8 MiB cap", self.payload.len())));
        }
        if self.deadline_ms == 0 {
            return Err(invalid("deadline_ms", "must be positive"));
        }
        Ok(())
    }
}

/// Fresh 16-byte call id, hex encoded.
pub fn new_call_id(rng: &mut impl Rng) -> String {
    let mut bytes = [0u8; 16];
    rng.fill(&mut bytes);
    hex::encode(bytes)
}

/// Stable error codes carried on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorCode {
    #[serde(rename = "NOT_FOUND")]
    NotFound,
    #[serde(rename = "DEADLINE_EXCEEDED")]
    DeadlineExceeded,
    #[serde(rename = "OVERLOADED")]
    Overloaded,
    #[serde(rename = "INSTANCE_START_FAILED")]
    InstanceStartFailed,
    #[serde(rename = "FUNCTION_ERROR")]
    FunctionError,
    #[serde(rename = "TRANSPORT_ERROR")]
    TransportError,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::NotFound => "NOT_FOUND",
            ErrorCode::DeadlineExceeded => "DEADLINE_EXCEEDED",
            ErrorCode::Overloaded => "OVERLOADED",
            ErrorCode::InstanceStartFailed => "INSTANCE_START_FAILED",
            ErrorCode::FunctionError => "FUNCTION_ERROR",
            ErrorCode::TransportError => "TRANSPORT_ERROR",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCode {
    type Err = InvalidField;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NOT_FOUND" => Ok(ErrorCode::NotFound),
            "DEADLINE_EXCEEDED" => Ok(ErrorCode::DeadlineExceeded),
            "OVERLOADED" => Ok(ErrorCode::Overloaded),
            "INSTANCE_START_FAILED" => Ok(ErrorCode::InstanceStartFailed),
            "FUNCTION_ERROR" => Ok(ErrorCode::FunctionError),
            "TRANSPORT_ERROR" => Ok(ErrorCode::TransportError),
            other => Err(invalid("error code", other.to_string())),
        }
    }
}

/// Result of a call: the function's reply or a coded failure.
#[derive(Debug, Clone, PartialEq)]
pub enum CallOutcome {
    Ok(Vec<u8>),
    Err { code: ErrorCode, message: String },
}

impl CallOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, CallOutcome::Ok(_))
    }

    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            CallOutcome::Ok(_) => None,
            CallOutcome::Err { code, .. } => Some(*code),
        }
    }
}

/// The single response produced for every [`CallRequest`].
#[derive(Debug, Clone, PartialEq)]
pub struct CallResponse {
    pub call_id: String,
    pub outcome: CallOutcome,
    /// True when the serving instance was created for this call.
    pub cold_start: bool,
    /// Time spent waiting for admission.
    pub queue_wait_ms: u64,
    /// Time from admission to completion (includes instance start for
    /// cold calls).
    pub exec_ms: u64,
    pub worker_id: String,
}

impl CallResponse {
    /// Failure response carrying the caller's id.
    pub fn error(call_id: impl Into<String>, code: ErrorCode, message: impl Into<String>, worker_id: impl Into<String>) -> Self {
        Self {
            call_id: call_id.into(),
            outcome: CallOutcome::Err { code, message: message.into() },
            cold_start: false,
            queue_wait_ms: 0,
            exec_ms: 0,
            worker_id: worker_id.into(),
        }
    }
}

/// Externally visible state of one instance inside a worker snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Starting,
    Idle,
    Busy,
}

impl InstanceStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            InstanceStatus::Starting => "starting",
            InstanceStatus::Idle => "idle",
            InstanceStatus::Busy => "busy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSnapshot {
    pub instance_id: String,
    pub function: FunctionId,
    pub status: InstanceStatus,
    pub in_flight: u64,
    pub started_at_ms: u64,
}

/// A worker's externally visible state at one point in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSnapshot {
    pub worker_id: String,
    pub taken_at_ms: u64,
    pub instances: Vec<InstanceSnapshot>,
    pub utilization: f64,
}

impl WorkerSnapshot {
    pub fn empty(worker_id: impl Into<String>, taken_at_ms: u64) -> Self {
        Self { worker_id: worker_id.into(), taken_at_ms, instances: Vec::new(), utilization: 0.0 }
    }

    pub fn total_in_flight(&self) -> u64 {
        self.instances.iter().map(|i| i.in_flight).sum()
    }

    pub fn instances_of<'a>(&'a self, function: &'a FunctionId) -> impl Iterator<Item = &'a InstanceSnapshot> {
        self.instances.iter().filter(move |i| &i.function == function)
    }

    pub fn validate(&self) -> Result<(), InvalidField> {
        if !(0.0..=1.0).contains(&self.utilization) {
            return Err(invalid("utilization", "must be within 0..1"));
        }
        for inst in &self.instances {
            let busy = inst.in_flight > 0;
            match inst.status {
                InstanceStatus::Busy if !busy => {
                    return Err(invalid("instance status", "busy with zero in-flight"))
                }
                InstanceStatus::Idle | InstanceStatus::Starting if busy => {
                    return Err(invalid("instance status", "in-flight on a non-busy instance"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// What a stop command targets.
#[derive(Debug, Clone, PartialEq)]
pub enum StopTarget {
    Function(FunctionId),
    Instance(String),
}

/// Command from a leaf to stop an instance or a whole function.
#[derive(Debug, Clone, PartialEq)]
pub struct StopRequest {
    pub target: StopTarget,
}

/// A coded refusal returned for state/stop requests a node cannot serve.
#[derive(Debug, Clone, PartialEq)]
pub struct Refusal {
    pub code: ErrorCode,
    pub message: String,
}

impl Refusal {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl fmt::Display for Refusal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}
