//! Fitted worker model: per-function linear latency coefficients plus
//! noise and failure parameters, and the sampler emulated workers use
//! to synthesize responses from it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::protocol::types::FunctionId;

use super::EmulatorError;

/// Identifies the fitting procedure that produced a model file.
pub const MODEL_VERSION: &str = "linear-v1";

/// Number of latency features: intercept, in-flight, payload KiB,
/// utilization.
pub const FEATURES: usize = 4;

/// Fixed reply body emulated instances return on success (64 bytes).
pub const SYNTHETIC_PAYLOAD: &[u8; 64] = b"emulated-function-response-payload-00123456789abcdef0123456789ab";

/// Minimum sample count before a failure rate is trusted.
pub const FAILURE_RATE_MIN_SAMPLES: u64 = 50;

/// Fitted parameters for one function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionModel {
    /// [intercept ms, ms per in-flight, ms per payload KiB, ms per unit
    /// utilization]
    pub beta: [f64; FEATURES],
    /// Residual standard deviation of the latency fit.
    pub sigma_ms: f64,
    /// Additive latency for calls that create their instance.
    pub cold_extra_ms: f64,
    /// Stationary per-call failure probability.
    pub failure_rate: f64,
    pub n_samples: u64,
    /// Set when `n_samples` was too small to trust the failure rate,
    /// which is then forced to 0.
    pub failure_rate_warning: bool,
}

impl FunctionModel {
    /// Mean latency for a feature vector, clamped at zero.
    pub fn mean_latency_ms(&self, inflight: u32, payload_bytes: u64, utilization: f64) -> f64 {
        let x = [1.0, f64::from(inflight), payload_bytes as f64 / 1024.0, utilization];
        let mean: f64 = self.beta.iter().zip(x.iter()).map(|(b, v)| b * v).sum();
        mean.max(0.0)
    }
}

/// The full model an emulated worker serves from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerModel {
    pub model_version: String,
    pub functions: BTreeMap<String, FunctionModel>,
}

impl WorkerModel {
    pub fn new() -> Self {
        Self { model_version: MODEL_VERSION.to_string(), functions: BTreeMap::new() }
    }

    pub fn covers(&self, function: &FunctionId) -> bool {
        self.functions.contains_key(function.as_str())
    }

    pub fn function(&self, function: &FunctionId) -> Option<&FunctionModel> {
        self.functions.get(function.as_str())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmulatorError> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| EmulatorError::Model(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmulatorError> {
        let bytes = std::fs::read(path)?;
        let model: WorkerModel =
            serde_json::from_slice(&bytes).map_err(|e| EmulatorError::Model(e.to_string()))?;
        Ok(model)
    }
}

impl Default for WorkerModel {
    fn default() -> Self {
        Self::new()
    }
}

/// Sample one synthetic invocation: latency in ms (never negative) and
/// whether the call succeeds. Deterministic for a given rng state.
pub fn emulate_invoke(
    model: &WorkerModel,
    function: &FunctionId,
    payload_bytes: u64,
    inflight: u32,
    utilization: f64,
    cold: bool,
    rng: &mut impl Rng,
) -> Result<(f64, bool), EmulatorError> {
    let fm = model
        .function(function)
        .ok_or_else(|| EmulatorError::Uncovered(function.to_string()))?;

    let x = [1.0, f64::from(inflight), payload_bytes as f64 / 1024.0, utilization];
    let mut latency: f64 = fm.beta.iter().zip(x.iter()).map(|(b, v)| b * v).sum();
    if fm.sigma_ms > 0.0 {
        let noise = Normal::new(0.0, fm.sigma_ms)
            .map_err(|e| EmulatorError::Model(e.to_string()))?
            .sample(rng);
        latency += noise;
    }
    if cold {
        latency += fm.cold_extra_ms;
    }
    let latency = latency.max(0.0);

    let success = if fm.failure_rate <= 0.0 {
        true
    } else if fm.failure_rate >= 1.0 {
        false
    } else {
        rng.gen::<f64>() >= fm.failure_rate
    };
    Ok((latency, success))
}
