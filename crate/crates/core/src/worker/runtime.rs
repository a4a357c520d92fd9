//! The replaceable instance runtime: how a worker actually starts,
//! invokes, and stops function instances.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use thiserror::Error;

use crate::protocol::types::{FunctionConfig, FunctionId};

/// Per-invocation context handed to the runtime. Model-backed runtimes
/// synthesize behavior from it; real runtimes ignore most of it.
#[derive(Debug, Clone)]
pub struct InvokeCtx {
    pub call_id: String,
    pub function: FunctionId,
    /// Per-instance mean in-flight for the function (including this
    /// call), matching how trace recording attributes concurrency from
    /// state snapshots.
    pub inflight: u32,
    /// Worker-level utilization proxy at admission, 0..1.
    pub utilization: f64,
    /// True when the serving instance was created for this call.
    pub cold: bool,
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("instance start failed: {0}")]
    Start(String),
}

#[derive(Debug, Error)]
pub enum InvokeError {
    /// The function reported an error.
    #[error("function error: {0}")]
    Function(String),
    /// The invocation did not finish inside its deadline.
    #[error("deadline exceeded")]
    DeadlineExceeded,
    /// The instance died mid-call.
    #[error("instance crashed: {0}")]
    Crashed(String),
    /// Model-backed runtime has no model for this function.
    #[error("function not covered: {0}")]
    Uncovered(String),
}

/// One running instance.
#[async_trait]
pub trait RuntimeInstance: Send + Sync {
    /// Run one call. Must return within `timeout` plus a small hard-kill
    /// grace (100 ms).
    async fn invoke(
        &self,
        ctx: &InvokeCtx,
        payload: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, InvokeError>;

    async fn stop(&self);

    /// CPU fraction of the configured limit, when measurable.
    fn cpu_fraction(&self) -> Option<f64> {
        None
    }
}

#[async_trait]
pub trait Runtime: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Whether `start_instance` needs the image blob.
    fn needs_image(&self) -> bool {
        true
    }

    async fn start_instance(
        &self,
        config: &FunctionConfig,
        instance_id: &str,
        image: Option<Arc<Vec<u8>>>,
    ) -> Result<Arc<dyn RuntimeInstance>, RuntimeError>;
}

/// Overlap counters for one instrumented instance.
#[derive(Debug, Default)]
pub struct OverlapProbe {
    current: AtomicU32,
    max: AtomicU32,
    invocations: AtomicU64,
}

impl OverlapProbe {
    pub fn max_overlap(&self) -> u32 {
        self.max.load(Ordering::SeqCst)
    }

    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::SeqCst)
    }

    fn enter(&self) {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.invocations.fetch_add(1, Ordering::SeqCst);
        self.max.fetch_max(now, Ordering::SeqCst);
    }

    fn exit(&self) {
        self.current.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Test and experiment runtime that sleeps a fixed latency and records
/// the maximum number of overlapping invokes per instance, so
/// concurrency policies can be checked from the outside.
pub struct InstrumentedRuntime {
    invoke_latency: Duration,
    start_delay: Duration,
    probes: Mutex<Vec<(String, Arc<OverlapProbe>)>>,
}

impl InstrumentedRuntime {
    pub fn new(invoke_latency: Duration, start_delay: Duration) -> Self {
        Self { invoke_latency, start_delay, probes: Mutex::new(Vec::new()) }
    }

    /// (instance_id, max overlap, invocations) per instance ever started.
    pub fn overlap_report(&self) -> Vec<(String, u32, u64)> {
        self.probes
            .lock()
            .unwrap()
            .iter()
            .map(|(id, p)| (id.clone(), p.max_overlap(), p.invocations()))
            .collect()
    }

    pub fn instances_started(&self) -> usize {
        self.probes.lock().unwrap().len()
    }
}

struct InstrumentedInstance {
    latency: Duration,
    probe: Arc<OverlapProbe>,
}

#[async_trait]
impl RuntimeInstance for InstrumentedInstance {
    async fn invoke(
        &self,
        _ctx: &InvokeCtx,
        payload: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, InvokeError> {
        self.probe.enter();
        let result = if self.latency > timeout {
            tokio::time::sleep(timeout).await;
            Err(InvokeError::DeadlineExceeded)
        } else {
            tokio::time::sleep(self.latency).await;
            Ok(payload.to_vec())
        };
        self.probe.exit();
        result
    }

    async fn stop(&self) {}
}

#[async_trait]
impl Runtime for InstrumentedRuntime {
    fn kind(&self) -> &'static str {
        "instrumented"
    }

    fn needs_image(&self) -> bool {
        false
    }

    async fn start_instance(
        &self,
        _config: &FunctionConfig,
        instance_id: &str,
        _image: Option<Arc<Vec<u8>>>,
    ) -> Result<Arc<dyn RuntimeInstance>, RuntimeError> {
        if !self.start_delay.is_zero() {
            tokio::time::sleep(self.start_delay).await;
        }
        let probe = Arc::new(OverlapProbe::default());
        self.probes.lock().unwrap().push((instance_id.to_string(), Arc::clone(&probe)));
        Ok(Arc::new(InstrumentedInstance { latency: self.invoke_latency, probe }))
    }
}
