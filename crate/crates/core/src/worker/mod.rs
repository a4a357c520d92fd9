//! Worker node: starts function instances on demand, enforces the
//! within-instance concurrency policy, tracks in-flight requests, and
//! stops instances on idle timeout or explicit command.

pub mod admission;
pub mod emulated;
pub mod process;
pub mod runtime;
pub mod scale;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use tokio::sync::{oneshot, watch};
use tracing::{debug, warn};

use crate::protocol::transport::{NodeHandle, TransportError};
use crate::protocol::types::{
    CallOutcome, CallRequest, CallResponse, ConcurrencyMode, ErrorCode, FunctionConfig,
    FunctionId, InstanceSnapshot, InstanceStatus, Refusal, StopRequest, StopTarget,
    WorkerSnapshot,
};
use crate::registry::{ConfigCache, ConfigStore, ImageCache, ImageStore, StoreError};
use crate::util::epoch_ms;

use admission::{admit, AdmissionDecision, AdmissionLimits, InstanceLoad};
use runtime::{InvokeCtx, InvokeError, Runtime, RuntimeInstance};
use scale::{ScaleAction, ScaleTracker, UtilReading};

pub use admission::{AdmissionDecision as Admission, AdmissionLimits as Limits};
pub use emulated::EmulatedRuntime;
pub use process::ProcessRuntime;
pub use runtime::{InstrumentedRuntime, OverlapProbe};

/// Default divisor for the in-flight utilization proxy used by
/// emulated instances and worker-level utilization.
pub const DEFAULT_REFERENCE_CONCURRENCY: u32 = 16;

/// How long in-flight calls may finish after an explicit stop before
/// being hard-killed.
pub const DEFAULT_DRAIN_TIMEOUT_MS: u64 = 5_000;

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub worker_id: String,
    pub limits: AdmissionLimits,
    pub reference_concurrency: u32,
    pub drain_timeout_ms: u64,
    /// Allow the scale checker to stop surplus idle replicas. Off keeps
    /// only the scale-up rule active.
    pub scale_down: bool,
}

impl WorkerOptions {
    pub fn new(worker_id: impl Into<String>) -> Self {
        Self {
            worker_id: worker_id.into(),
            limits: AdmissionLimits::default(),
            reference_concurrency: DEFAULT_REFERENCE_CONCURRENCY,
            drain_timeout_ms: DEFAULT_DRAIN_TIMEOUT_MS,
            scale_down: true,
        }
    }
}

#[derive(Clone)]
enum Gate {
    Pending,
    Ready(Arc<dyn RuntimeInstance>),
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Starting,
    Running,
    Stopping,
}

struct InstanceEntry {
    id: String,
    function: FunctionId,
    created_at_ms: u64,
    phase: Phase,
    in_flight: u32,
    last_finished: Instant,
    gate_tx: Arc<watch::Sender<Gate>>,
    kill_tx: Arc<watch::Sender<bool>>,
    runtime: Option<Arc<dyn RuntimeInstance>>,
}

impl InstanceEntry {
    fn new(id: String, function: FunctionId, in_flight: u32) -> Self {
        let (gate_tx, _) = watch::channel(Gate::Pending);
        let (kill_tx, _) = watch::channel(false);
        Self {
            id,
            function,
            created_at_ms: epoch_ms(),
            phase: Phase::Starting,
            in_flight,
            last_finished: Instant::now(),
            gate_tx: Arc::new(gate_tx),
            kill_tx: Arc::new(kill_tx),
            runtime: None,
        }
    }
}

/// Admission grant handed to a waiting call.
enum Grant {
    /// Run on an existing instance (it may still be starting).
    Use { instance_id: String },
    /// This call created `instance_id` and must drive its start.
    Create { instance_id: String },
}

impl Grant {
    fn instance_id(&self) -> &str {
        match self {
            Grant::Use { instance_id } | Grant::Create { instance_id } => instance_id,
        }
    }
}

struct Waiter {
    tx: oneshot::Sender<Grant>,
}

struct FunctionTable {
    config: FunctionConfig,
    instances: BTreeMap<String, InstanceEntry>,
    queue: VecDeque<Waiter>,
    tracker: ScaleTracker,
    scale_loop_running: bool,
}

impl FunctionTable {
    fn new(config: FunctionConfig) -> Self {
        Self {
            config,
            instances: BTreeMap::new(),
            queue: VecDeque::new(),
            tracker: ScaleTracker::new(),
            scale_loop_running: false,
        }
    }

    fn loads(&self) -> Vec<InstanceLoad<'_>> {
        self.instances
            .values()
            .map(|e| InstanceLoad {
                instance_id: e.id.as_str(),
                in_flight: e.in_flight,
                stopping: e.phase == Phase::Stopping,
            })
            .collect()
    }
}

#[derive(Default)]
struct WorkerState {
    functions: HashMap<FunctionId, FunctionTable>,
    instance_seq: u64,
    admitted: u64,
    completed: u64,
    failed: u64,
}

impl WorkerState {
    fn next_instance_id(&mut self) -> String {
        let id = format!("i{:06}", self.instance_seq);
        self.instance_seq += 1;
        id
    }

    fn total_in_flight_and_count(&self) -> (u64, u64) {
        let mut total = 0u64;
        let mut count = 0u64;
        for ft in self.functions.values() {
            for e in ft.instances.values() {
                total += u64::from(e.in_flight);
                count += 1;
            }
        }
        (total, count)
    }

    /// Grant queued calls while capacity exists. Runs while the state
    /// lock is held; grants whose receiver is gone are rolled back.
    fn pump_queue(&mut self, function: &FunctionId, limits: &AdmissionLimits) {
        loop {
            let Some(ft) = self.functions.get_mut(function) else { return };
            if ft.queue.is_empty() {
                return;
            }
            let decision = admit(&ft.config.concurrency, &ft.loads(), 0, limits);
            match decision {
                AdmissionDecision::Admit { instance_id } => {
                    let waiter = ft.queue.pop_front().expect("queue non-empty");
                    let entry = ft.instances.get_mut(&instance_id).expect("admitted instance");
                    entry.in_flight += 1;
                    self.admitted += 1;
                    if waiter.tx.send(Grant::Use { instance_id: instance_id.clone() }).is_err() {
                        // waiter gave up (deadline); undo
                        let ft = self.functions.get_mut(function).expect("table exists");
                        let entry = ft.instances.get_mut(&instance_id).expect("instance");
                        entry.in_flight -= 1;
                        self.admitted -= 1;
                    }
                }
                AdmissionDecision::StartNew => {
                    let id = self.next_instance_id();
                    let waiter = {
                        let ft = self.functions.get_mut(function).expect("table exists");
                        let waiter = ft.queue.pop_front().expect("queue non-empty");
                        ft.instances
                            .insert(id.clone(), InstanceEntry::new(id.clone(), function.clone(), 1));
                        waiter
                    };
                    self.admitted += 1;
                    if waiter.tx.send(Grant::Create { instance_id: id.clone() }).is_err() {
                        let ft = self.functions.get_mut(function).expect("table exists");
                        ft.instances.remove(&id);
                        self.admitted -= 1;
                    }
                }
                AdmissionDecision::Queue | AdmissionDecision::Reject => return,
            }
        }
    }
}

/// A worker node. Construct with [`WorkerNode::new`] inside a tokio
/// runtime; background reaping starts immediately.
pub struct WorkerNode {
    opts: WorkerOptions,
    runtime: Arc<dyn Runtime>,
    configs: ConfigCache,
    images: ImageCache,
    inner: Mutex<WorkerState>,
    me: Weak<WorkerNode>,
    shutting_down: AtomicBool,
}

impl WorkerNode {
    pub fn new(
        opts: WorkerOptions,
        runtime: Arc<dyn Runtime>,
        config_store: ConfigStore,
        image_store: ImageStore,
    ) -> Arc<Self> {
        let node = Arc::new_cyclic(|me: &Weak<WorkerNode>| {
            Self {
                opts,
                runtime,
                configs: ConfigCache::new(config_store),
                images: ImageCache::new(image_store),
                inner: Mutex::new(WorkerState::default()),
                me: me.clone(),
                shutting_down: AtomicBool::new(false),
            }
        });
        Self::spawn_reaper(Arc::downgrade(&node));
        node
    }

    pub fn worker_id(&self) -> &str {
        &self.opts.worker_id
    }

    fn err_response(&self, req: &CallRequest, code: ErrorCode, message: impl Into<String>) -> CallResponse {
        CallResponse::error(&req.call_id, code, message, &self.opts.worker_id)
    }

    /// Serve one call end to end.
    pub async fn handle_call(&self, req: CallRequest) -> CallResponse {
        let arrival = Instant::now();
        if self.shutting_down.load(Ordering::SeqCst) {
            return self.err_response(&req, ErrorCode::Overloaded, "worker shutting down");
        }
        let deadline = arrival + Duration::from_millis(req.deadline_ms.max(1));
        let config = match self.configs.get(&req.function) {
            Ok(c) => c,
            Err(StoreError::NotFound(_)) => {
                return self.err_response(
                    &req,
                    ErrorCode::NotFound,
                    format!("no config for function {}", req.function),
                )
            }
            Err(e) => {
                return self.err_response(&req, ErrorCode::NotFound, format!("config store: {e}"))
            }
        };

        let grant = match self.admitted_grant(&req, &config, arrival, deadline).await {
            Ok(g) => g,
            Err(resp) => return resp,
        };
        let queue_wait = arrival.elapsed();
        let exec_start = Instant::now();
        let cold = matches!(grant, Grant::Create { .. });
        let instance_id = grant.instance_id().to_string();

        if cold {
            self.drive_instance_start(&config, &instance_id).await;
        }

        let outcome = self.run_on_instance(&req, &config, &instance_id, cold, deadline).await;
        let exec_ms = exec_start.elapsed().as_millis() as u64;

        let failed = !outcome.is_ok();
        self.finish_call(&req.function, &instance_id, failed);

        CallResponse {
            call_id: req.call_id.clone(),
            outcome,
            cold_start: cold,
            queue_wait_ms: queue_wait.as_millis() as u64,
            exec_ms,
            worker_id: self.opts.worker_id.clone(),
        }
    }

    /// Run admission, waiting in the queue if necessary.
    async fn admitted_grant(
        &self,
        req: &CallRequest,
        config: &FunctionConfig,
        arrival: Instant,
        deadline: Instant,
    ) -> Result<Grant, CallResponse> {
        let mut wait_rx = {
            let mut state = self.inner.lock().unwrap();
            let ft = state
                .functions
                .entry(req.function.clone())
                .or_insert_with(|| FunctionTable::new(config.clone()));
            ft.config = config.clone();
            self.ensure_scale_loop(ft, &req.function, config);

            let queue_len = ft.queue.len() as u32;
            match admit(&config.concurrency, &ft.loads(), queue_len, &self.opts.limits) {
                AdmissionDecision::Admit { instance_id } => {
                    let entry = ft.instances.get_mut(&instance_id).expect("admitted instance");
                    entry.in_flight += 1;
                    state.admitted += 1;
                    return Ok(Grant::Use { instance_id });
                }
                AdmissionDecision::StartNew => {
                    let id = state.next_instance_id();
                    let ft = state.functions.get_mut(&req.function).expect("table exists");
                    ft.instances
                        .insert(id.clone(), InstanceEntry::new(id.clone(), req.function.clone(), 1));
                    state.admitted += 1;
                    return Ok(Grant::Create { instance_id: id });
                }
                AdmissionDecision::Queue => {
                    let (tx, rx) = oneshot::channel();
                    ft.queue.push_back(Waiter { tx });
                    rx
                }
                AdmissionDecision::Reject => {
                    return Err(self.err_response(req, ErrorCode::Overloaded, "admission queue full"))
                }
            }
        };

        tokio::select! {
            granted = &mut wait_rx => match granted {
                Ok(grant) => Ok(grant),
                Err(_) => Err(self.err_response(req, ErrorCode::Overloaded, "queue abandoned")),
            },
            _ = tokio::time::sleep_until(tokio::time::Instant::from_std(deadline)) => {
                // a grant may have raced in right before the deadline;
                // it was already booked and must be undone
                if let Ok(grant) = wait_rx.try_recv() {
                    self.rollback_grant(&req.function, grant);
                }
                let mut resp =
                    self.err_response(req, ErrorCode::DeadlineExceeded, "deadline exceeded in queue");
                resp.queue_wait_ms = arrival.elapsed().as_millis() as u64;
                Err(resp)
            }
        }
    }

    fn rollback_grant(&self, function: &FunctionId, grant: Grant) {
        let mut orphaned_start: Option<(FunctionConfig, String)> = None;
        {
            let mut state = self.inner.lock().unwrap();
            state.admitted -= 1;
            if let Some(ft) = state.functions.get_mut(function) {
                match grant {
                    Grant::Use { instance_id } => {
                        if let Some(entry) = ft.instances.get_mut(&instance_id) {
                            entry.in_flight = entry.in_flight.saturating_sub(1);
                            entry.last_finished = Instant::now();
                        }
                    }
                    Grant::Create { instance_id } => {
                        // other calls may have co-admitted onto the new
                        // entry already; then someone must still drive
                        // its start
                        if let Some(entry) = ft.instances.get_mut(&instance_id) {
                            entry.in_flight = entry.in_flight.saturating_sub(1);
                            if entry.in_flight == 0 {
                                ft.instances.remove(&instance_id);
                            } else {
                                orphaned_start = Some((ft.config.clone(), instance_id));
                            }
                        }
                    }
                }
            }
            state.pump_queue(function, &self.opts.limits);
        }
        if let Some((config, instance_id)) = orphaned_start {
            if let Some(node) = self.me.upgrade() {
                tokio::spawn(async move {
                    node.drive_instance_start(&config, &instance_id).await;
                });
            }
        }
    }

    /// Creator path: fetch the image if the runtime wants one, start the
    /// instance, and resolve its gate.
    async fn drive_instance_start(&self, config: &FunctionConfig, instance_id: &str) {
        let function = config.function.clone();
        let image = if self.runtime.needs_image() {
            match self.images.get(&config.image_digest) {
                Ok(blob) => Some(blob),
                Err(e) => {
                    self.fail_instance_start(&function, instance_id, format!("image: {e}"));
                    return;
                }
            }
        } else {
            None
        };

        match self.runtime.start_instance(config, instance_id, image).await {
            Ok(rt) => {
                let mut state = self.inner.lock().unwrap();
                if let Some(ft) = state.functions.get_mut(&function) {
                    if let Some(entry) = ft.instances.get_mut(instance_id) {
                        entry.runtime = Some(Arc::clone(&rt));
                        if entry.phase == Phase::Starting {
                            entry.phase = Phase::Running;
                        }
                        entry.gate_tx.send_replace(Gate::Ready(rt));
                        return;
                    }
                }
                // entry vanished (stopped during start): stop the runtime
                tokio::spawn(async move { rt.stop().await });
            }
            Err(e) => {
                self.fail_instance_start(&function, instance_id, e.to_string());
            }
        }
    }

    fn fail_instance_start(&self, function: &FunctionId, instance_id: &str, message: String) {
        let mut state = self.inner.lock().unwrap();
        if let Some(ft) = state.functions.get_mut(function) {
            if let Some(entry) = ft.instances.remove(instance_id) {
                entry.gate_tx.send_replace(Gate::Failed(message));
            }
        }
        state.pump_queue(function, &self.opts.limits);
    }

    /// Wait for the instance to be ready, then invoke.
    async fn run_on_instance(
        &self,
        req: &CallRequest,
        config: &FunctionConfig,
        instance_id: &str,
        cold: bool,
        deadline: Instant,
    ) -> CallOutcome {
        let (mut gate_rx, mut kill_rx) = {
            let state = self.inner.lock().unwrap();
            match state.functions.get(&req.function).and_then(|ft| ft.instances.get(instance_id)) {
                Some(entry) => (entry.gate_tx.subscribe(), entry.kill_tx.subscribe()),
                None => {
                    return CallOutcome::Err {
                        code: ErrorCode::InstanceStartFailed,
                        message: "instance failed to start".into(),
                    }
                }
            }
        };

        let rt = loop {
            let gate = gate_rx.borrow_and_update().clone();
            match gate {
                Gate::Ready(rt) => break rt,
                Gate::Failed(message) => {
                    return CallOutcome::Err { code: ErrorCode::InstanceStartFailed, message }
                }
                Gate::Pending => {
                    let remaining = deadline.saturating_duration_since(Instant::now());
                    if remaining.is_zero() {
                        return CallOutcome::Err {
                            code: ErrorCode::DeadlineExceeded,
                            message: "deadline exceeded while instance was starting".into(),
                        };
                    }
                    match tokio::time::timeout(remaining, gate_rx.changed()).await {
                        Ok(Ok(())) => continue,
                        Ok(Err(_)) => {
                            return CallOutcome::Err {
                                code: ErrorCode::InstanceStartFailed,
                                message: "instance dropped while starting".into(),
                            }
                        }
                        Err(_) => {
                            return CallOutcome::Err {
                                code: ErrorCode::DeadlineExceeded,
                                message: "deadline exceeded while instance was starting".into(),
                            }
                        }
                    }
                }
            }
        };

        let (inflight, utilization) = {
            let state = self.inner.lock().unwrap();
            (self.function_inflight_locked(&state, &req.function), self.utilization_locked(&state))
        };

        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return CallOutcome::Err {
                code: ErrorCode::DeadlineExceeded,
                message: "deadline exceeded before invoke".into(),
            };
        }
        let budget = remaining.min(Duration::from_millis(config.exec_deadline_ms));
        let ctx = InvokeCtx {
            call_id: req.call_id.clone(),
            function: req.function.clone(),
            inflight,
            utilization,
            cold,
        };

        let invoke = rt.invoke(&ctx, &req.payload, budget);
        tokio::pin!(invoke);
        let result = tokio::select! {
            r = &mut invoke => r,
            _ = kill_rx.changed() => Err(InvokeError::Function("instance stopped".into())),
        };

        match result {
            Ok(payload) => CallOutcome::Ok(payload),
            Err(InvokeError::Function(message)) => {
                CallOutcome::Err { code: ErrorCode::FunctionError, message }
            }
            Err(InvokeError::DeadlineExceeded) => CallOutcome::Err {
                code: ErrorCode::DeadlineExceeded,
                message: "execution deadline exceeded".into(),
            },
            Err(InvokeError::Crashed(message)) => {
                CallOutcome::Err { code: ErrorCode::FunctionError, message }
            }
            Err(InvokeError::Uncovered(f)) => CallOutcome::Err {
                code: ErrorCode::NotFound,
                message: format!("function {f} not covered by worker model"),
            },
        }
    }

    /// Per-instance mean in-flight for one function, the same statistic
    /// trace recording attributes from state snapshots. Model-backed
    /// runtimes must see the feature definition the model was fitted
    /// on, so this is what goes into the invoke context.
    fn function_inflight_locked(&self, state: &WorkerState, function: &FunctionId) -> u32 {
        let Some(ft) = state.functions.get(function) else { return 1 };
        let mut total = 0u64;
        let mut count = 0u64;
        for e in ft.instances.values() {
            if e.phase == Phase::Stopping && e.in_flight == 0 {
                continue;
            }
            total += u64::from(e.in_flight);
            count += 1;
        }
        if count == 0 {
            return 1;
        }
        ((total as f64 / count as f64).round() as u32).max(1)
    }

    fn utilization_locked(&self, state: &WorkerState) -> f64 {
        let (total, count) = state.total_in_flight_and_count();
        if count == 0 {
            return 0.0;
        }
        let cap = count as f64 * f64::from(self.opts.reference_concurrency);
        (total as f64 / cap).min(1.0)
    }

    /// Book-keeping common to every admitted call's completion.
    fn finish_call(&self, function: &FunctionId, instance_id: &str, failed: bool) {
        let mut to_stop: Option<Arc<dyn RuntimeInstance>> = None;
        {
            let mut state = self.inner.lock().unwrap();
            if failed {
                state.failed += 1;
            } else {
                state.completed += 1;
            }
            if let Some(ft) = state.functions.get_mut(function) {
                if let Some(entry) = ft.instances.get_mut(instance_id) {
                    entry.in_flight = entry.in_flight.saturating_sub(1);
                    entry.last_finished = Instant::now();
                    if entry.phase == Phase::Stopping && entry.in_flight == 0 {
                        let entry = ft.instances.remove(instance_id).expect("entry exists");
                        to_stop = entry.runtime;
                    }
                }
            }
            state.pump_queue(function, &self.opts.limits);
        }
        if let Some(rt) = to_stop {
            tokio::spawn(async move { rt.stop().await });
        }
    }

    /// Consistent point-in-time snapshot of instances and utilization.
    pub fn snapshot(&self) -> WorkerSnapshot {
        let state = self.inner.lock().unwrap();
        self.snapshot_locked(&state)
    }

    fn snapshot_locked(&self, state: &WorkerState) -> WorkerSnapshot {
        let mut instances = Vec::new();
        for ft in state.functions.values() {
            for e in ft.instances.values() {
                let status = if e.in_flight > 0 {
                    InstanceStatus::Busy
                } else {
                    match e.phase {
                        Phase::Starting => InstanceStatus::Starting,
                        Phase::Running => InstanceStatus::Idle,
                        // drained stopping instances are mid-removal
                        Phase::Stopping => continue,
                    }
                };
                instances.push(InstanceSnapshot {
                    instance_id: e.id.clone(),
                    function: e.function.clone(),
                    status,
                    in_flight: u64::from(e.in_flight),
                    started_at_ms: e.created_at_ms,
                });
            }
        }
        instances.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        WorkerSnapshot {
            worker_id: self.opts.worker_id.clone(),
            taken_at_ms: epoch_ms(),
            instances,
            utilization: self.utilization_locked(state),
        }
    }

    /// Snapshot plus (admitted, completed, failed) counters, taken
    /// atomically. Lets tests check in-flight accounting conservation.
    pub fn snapshot_with_accounting(&self) -> (WorkerSnapshot, (u64, u64, u64)) {
        let state = self.inner.lock().unwrap();
        (self.snapshot_locked(&state), (state.admitted, state.completed, state.failed))
    }

    /// Stop one instance or every instance of a function. In-flight
    /// calls may drain for the configured timeout, then are killed.
    pub fn handle_stop(&self, req: &StopRequest) -> Result<(), Refusal> {
        let targets: Vec<(FunctionId, String)> = {
            let mut state = self.inner.lock().unwrap();
            match &req.target {
                StopTarget::Instance(id) => {
                    let mut found = None;
                    for (f, ft) in state.functions.iter_mut() {
                        if let Some(entry) = ft.instances.get_mut(id) {
                            if entry.phase != Phase::Stopping {
                                entry.phase = Phase::Stopping;
                            }
                            found = Some((f.clone(), id.clone()));
                            break;
                        }
                    }
                    match found {
                        Some(t) => vec![t],
                        None => {
                            return Err(Refusal::new(
                                ErrorCode::NotFound,
                                format!("unknown instance {id}"),
                            ))
                        }
                    }
                }
                StopTarget::Function(f) => {
                    let mut targets = Vec::new();
                    if let Some(ft) = state.functions.get_mut(f) {
                        for entry in ft.instances.values_mut() {
                            if entry.phase != Phase::Stopping {
                                entry.phase = Phase::Stopping;
                                targets.push((f.clone(), entry.id.clone()));
                            }
                        }
                    }
                    targets
                }
            }
        };

        for (function, instance_id) in targets {
            self.spawn_drain(function, instance_id);
        }
        Ok(())
    }

    fn spawn_drain(&self, function: FunctionId, instance_id: String) {
        let weak = self.me.clone();
        let drain = Duration::from_millis(self.opts.drain_timeout_ms);
        tokio::spawn(async move {
            let deadline = Instant::now() + drain;
            loop {
                let Some(node) = weak.upgrade() else { return };
                let decided: Option<Option<Arc<dyn RuntimeInstance>>> = {
                    let mut state = node.inner.lock().unwrap();
                    let Some(ft) = state.functions.get_mut(&function) else { return };
                    match ft.instances.get(&instance_id) {
                        // finish_call already removed it
                        None => return,
                        Some(entry) if entry.in_flight == 0 => {
                            let entry = ft.instances.remove(&instance_id).expect("entry exists");
                            state.pump_queue(&function, &node.opts.limits);
                            Some(entry.runtime)
                        }
                        Some(entry) if Instant::now() >= deadline => {
                            // drain timeout: kill in-flight calls
                            entry.kill_tx.send_replace(true);
                            None
                        }
                        Some(_) => None,
                    }
                };
                match decided {
                    Some(rt) => {
                        if let Some(rt) = rt {
                            rt.stop().await;
                        }
                        return;
                    }
                    None => tokio::time::sleep(Duration::from_millis(10)).await,
                }
            }
        });
    }

    fn ensure_scale_loop(&self, ft: &mut FunctionTable, function: &FunctionId, config: &FunctionConfig) {
        let ConcurrencyMode::Unlimited { check_interval_ms, .. } = config.concurrency else {
            return;
        };
        if ft.scale_loop_running {
            return;
        }
        ft.scale_loop_running = true;
        let weak = self.me.clone();
        let function = function.clone();
        tokio::spawn(async move {
            loop {
                tokio::time::sleep(Duration::from_millis(check_interval_ms)).await;
                let Some(node) = weak.upgrade() else { return };
                if node.shutting_down.load(Ordering::SeqCst) {
                    return;
                }
                if !node.scale_tick(&function).await {
                    return;
                }
            }
        });
    }

    /// One scale check for an unlimited-concurrency function. Returns
    /// false when the loop should exit (mode changed or table gone).
    async fn scale_tick(&self, function: &FunctionId) -> bool {
        let mut starts: Vec<(FunctionConfig, String)> = Vec::new();
        let mut stops: Vec<Arc<dyn RuntimeInstance>> = Vec::new();
        {
            let mut state = self.inner.lock().unwrap();
            let reference = f64::from(self.opts.reference_concurrency);
            let Some(ft) = state.functions.get_mut(function) else { return false };
            let ConcurrencyMode::Unlimited { util_threshold, .. } = ft.config.concurrency else {
                ft.scale_loop_running = false;
                return false;
            };
            let readings: Vec<UtilReading> = ft
                .instances
                .values()
                .filter(|e| e.phase != Phase::Stopping)
                .map(|e| {
                    let proxy = (f64::from(e.in_flight) / reference).min(1.0);
                    let utilization = e
                        .runtime
                        .as_ref()
                        .and_then(|rt| rt.cpu_fraction())
                        .unwrap_or(proxy);
                    UtilReading { instance_id: e.id.clone(), in_flight: e.in_flight, utilization }
                })
                .collect();
            let actions = ft.tracker.check(util_threshold, &readings);
            for action in actions {
                match action {
                    ScaleAction::StartReplica => {
                        let id = state.next_instance_id();
                        let ft = state.functions.get_mut(function).expect("table exists");
                        let mut entry = InstanceEntry::new(id.clone(), function.clone(), 0);
                        entry.phase = Phase::Starting;
                        ft.instances.insert(id.clone(), entry);
                        starts.push((ft.config.clone(), id));
                    }
                    ScaleAction::StopInstance { instance_id } => {
                        if !self.opts.scale_down {
                            continue;
                        }
                        let ft = state.functions.get_mut(function).expect("table exists");
                        if let Some(entry) = ft.instances.get_mut(&instance_id) {
                            if entry.in_flight == 0 {
                                let entry =
                                    ft.instances.remove(&instance_id).expect("entry exists");
                                if let Some(rt) = entry.runtime {
                                    stops.push(rt);
                                }
                            }
                        }
                    }
                }
            }
        }
        for (config, id) in starts {
            self.drive_instance_start(&config, &id).await;
        }
        for rt in stops {
            tokio::spawn(async move { rt.stop().await });
        }
        true
    }

    fn spawn_reaper(weak: Weak<WorkerNode>) {
        tokio::spawn(async move {
            loop {
                let period = match weak.upgrade() {
                    Some(node) => node.reap_period(),
                    None => return,
                };
                tokio::time::sleep(period).await;
                let Some(node) = weak.upgrade() else { return };
                node.reap_idle_once();
            }
        });
    }

    /// Reap period: a quarter of the smallest configured idle timeout,
    /// clamped to [25, 250] ms so reaping runs at least every 250 ms.
    fn reap_period(&self) -> Duration {
        let state = self.inner.lock().unwrap();
        let min_idle = state
            .functions
            .values()
            .map(|ft| ft.config.idle_timeout_ms)
            .min()
            .unwrap_or(1000);
        Duration::from_millis((min_idle / 4).clamp(25, 250))
    }

    /// Stop instances idle longer than their function's idle timeout.
    /// Never touches an instance with in-flight calls.
    pub fn reap_idle_once(&self) {
        let mut to_stop: Vec<(String, Option<Arc<dyn RuntimeInstance>>)> = Vec::new();
        {
            let mut state = self.inner.lock().unwrap();
            let mut victims: Vec<(FunctionId, String)> = Vec::new();
            for (f, ft) in state.functions.iter() {
                let timeout = Duration::from_millis(ft.config.idle_timeout_ms);
                for e in ft.instances.values() {
                    if e.phase == Phase::Running
                        && e.in_flight == 0
                        && e.last_finished.elapsed() > timeout
                    {
                        victims.push((f.clone(), e.id.clone()));
                    }
                }
            }
            for (f, id) in victims {
                if let Some(ft) = state.functions.get_mut(&f) {
                    if let Some(entry) = ft.instances.remove(&id) {
                        to_stop.push((id, entry.runtime));
                    }
                }
                state.pump_queue(&f, &self.opts.limits);
            }
        }
        for (id, rt) in to_stop {
            if let Some(rt) = rt {
                tokio::spawn(async move {
                    rt.stop().await;
                    debug!("reaped idle instance {id}");
                });
            }
        }
    }

    /// Drain and stop everything; the worker refuses new calls after.
    pub async fn shutdown(&self) {
        self.shutting_down.store(true, Ordering::SeqCst);
        let functions: Vec<FunctionId> = {
            let state = self.inner.lock().unwrap();
            state.functions.keys().cloned().collect()
        };
        for f in functions {
            let _ = self.handle_stop(&StopRequest { target: StopTarget::Function(f) });
        }
        let deadline = Instant::now() + Duration::from_millis(self.opts.drain_timeout_ms + 1000);
        loop {
            let empty = {
                let state = self.inner.lock().unwrap();
                state.functions.values().all(|ft| ft.instances.is_empty())
            };
            if empty || Instant::now() >= deadline {
                break;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }
}

#[async_trait]
impl NodeHandle for WorkerNode {
    async fn call(&self, req: CallRequest) -> Result<CallResponse, TransportError> {
        Ok(self.handle_call(req).await)
    }

    async fn state(&self) -> Result<WorkerSnapshot, TransportError> {
        Ok(self.snapshot())
    }

    async fn stop(&self, req: StopRequest) -> Result<(), TransportError> {
        match self.handle_stop(&req) {
            Ok(()) => Ok(()),
            Err(refusal) => Err(TransportError::Refused(refusal)),
        }
    }
}

impl Drop for WorkerNode {
    fn drop(&mut self) {
        if let Ok(state) = self.inner.lock() {
            let live: usize = state.functions.values().map(|ft| ft.instances.len()).sum();
            if live > 0 {
                warn!(worker = %self.opts.worker_id, live, "worker dropped with live instances");
            }
        }
    }
}
