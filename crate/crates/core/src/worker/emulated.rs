//! Model-backed runtime: instances sleep a sampled latency and return a
//! fixed synthetic payload (or fail) instead of executing code.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::emulator::model::{emulate_invoke, WorkerModel, SYNTHETIC_PAYLOAD};
use crate::emulator::EmulatorError;
use crate::protocol::types::{FunctionConfig, FunctionId};
use crate::util::derive_seed;

use super::runtime::{InvokeCtx, InvokeError, Runtime, RuntimeError, RuntimeInstance};

/// Runtime whose instances synthesize responses from a fitted
/// [`WorkerModel`]. Needs no images. Each instance draws from its own
/// seeded rng stream, so per-instance behavior is reproducible.
pub struct EmulatedRuntime {
    model: Arc<WorkerModel>,
    master_seed: u64,
    counter: AtomicU64,
}

impl EmulatedRuntime {
    pub fn new(model: Arc<WorkerModel>, master_seed: u64) -> Self {
        Self { model, master_seed, counter: AtomicU64::new(0) }
    }

    pub fn model(&self) -> &WorkerModel {
        &self.model
    }
}

struct EmulatedInstance {
    model: Arc<WorkerModel>,
    function: FunctionId,
    rng: Mutex<ChaCha8Rng>,
}

#[async_trait]
impl RuntimeInstance for EmulatedInstance {
    async fn invoke(
        &self,
        ctx: &InvokeCtx,
        payload: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, InvokeError> {
        let sampled = {
            let mut rng = self.rng.lock().unwrap();
            emulate_invoke(
                &self.model,
                &self.function,
                payload.len() as u64,
                ctx.inflight,
                ctx.utilization,
                ctx.cold,
                &mut *rng,
            )
        };
        let (latency_ms, success) = match sampled {
            Ok(pair) => pair,
            Err(EmulatorError::Uncovered(f)) => return Err(InvokeError::Uncovered(f)),
            Err(e) => return Err(InvokeError::Function(e.to_string())),
        };
        let latency = Duration::from_secs_f64(latency_ms / 1000.0);
        if latency > timeout {
            tokio::time::sleep(timeout).await;
            return Err(InvokeError::DeadlineExceeded);
        }
        tokio::time::sleep(latency).await;
        if success {
            Ok(SYNTHETIC_PAYLOAD.to_vec())
        } else {
            Err(InvokeError::Function("emulated failure".into()))
        }
    }

    async fn stop(&self) {}
}

#[async_trait]
impl Runtime for EmulatedRuntime {
    fn kind(&self) -> &'static str {
        "emulated"
    }

    fn needs_image(&self) -> bool {
        false
    }

    async fn start_instance(
        &self,
        config: &FunctionConfig,
        _instance_id: &str,
        _image: Option<Arc<Vec<u8>>>,
    ) -> Result<Arc<dyn RuntimeInstance>, RuntimeError> {
        let ordinal = self.counter.fetch_add(1, Ordering::SeqCst);
        let seed = derive_seed(self.master_seed, ordinal);
        Ok(Arc::new(EmulatedInstance {
            model: Arc::clone(&self.model),
            function: config.function.clone(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }))
    }
}
