//! Fidelity evaluation: replay a recorded trace against a model-backed
//! worker simulated in virtual time, then compare latency and failure
//! distributions against the recording.
//!
//! The replay reuses the worker's admission policy and scale checker
//! and the emulated runtime's sampling math, but advances a virtual
//! clock instead of sleeping, so a replay is fast and reproducible
//! bit-for-bit for a given (model, trace, seed).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::types::{ConcurrencyMode, ErrorCode, FunctionConfig, FunctionId};
use crate::util::{derive_seed, fnv1a, nearest_rank};
use crate::worker::admission::{admit, AdmissionDecision, AdmissionLimits, InstanceLoad};
use crate::worker::scale::{ScaleAction, ScaleTracker, UtilReading};

use super::model::{emulate_invoke, WorkerModel};
use super::trace::TraceRecord;

/// Knobs for a replay. Defaults mirror the live worker's defaults.
#[derive(Debug, Clone)]
pub struct ReplaySettings {
    pub seed: u64,
    /// Per-function configs (concurrency mode, idle timeout, exec
    /// deadline). Functions without one get [`default_config`].
    pub configs: HashMap<FunctionId, FunctionConfig>,
    /// Call deadline applied to every replayed call; matches the load
    /// generator's default.
    pub deadline_ms: u64,
    /// Reference concurrency for the in-flight utilization proxy.
    pub reference_concurrency: u32,
    pub limits: AdmissionLimits,
}

impl ReplaySettings {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            configs: HashMap::new(),
            deadline_ms: crate::bench::DEFAULT_CALL_DEADLINE_MS,
            reference_concurrency: crate::worker::DEFAULT_REFERENCE_CONCURRENCY,
            limits: AdmissionLimits::default(),
        }
    }
}

/// Config assumed for functions the caller gave none for.
pub fn default_config(function: &FunctionId) -> FunctionConfig {
    FunctionConfig {
        function: function.clone(),
        image_digest: "0".repeat(64),
        memory_limit_mb: 128,
        cpu_millis: 1000,
        concurrency: ConcurrencyMode::Unlimited { util_threshold: 0.8, check_interval_ms: 500 },
        idle_timeout_ms: 60_000,
        exec_deadline_ms: 30_000,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayedOutcome {
    Ok,
    FunctionError,
    DeadlineExceeded,
    Overloaded,
}

impl ReplayedOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, ReplayedOutcome::Ok)
    }

    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ReplayedOutcome::Ok => None,
            ReplayedOutcome::FunctionError => Some(ErrorCode::FunctionError),
            ReplayedOutcome::DeadlineExceeded => Some(ErrorCode::DeadlineExceeded),
            ReplayedOutcome::Overloaded => Some(ErrorCode::Overloaded),
        }
    }
}

/// One simulated call, aligned by `row` with the input trace.
#[derive(Debug, Clone)]
pub struct ReplayedCall {
    pub row: usize,
    pub function: FunctionId,
    pub queue_wait_ms: f64,
    pub exec_ms: f64,
    pub cold: bool,
    pub outcome: ReplayedOutcome,
}

const US_PER_MS: u64 = 1_000;

#[derive(Debug)]
enum Event {
    Arrival { row: usize },
    Completion { function: FunctionId, ordinal: u64, row: usize, queue_wait_us: u64, cold: bool, exec_us: u64, outcome: ReplayedOutcome },
    QueueDeadline { function: FunctionId, entry: u64 },
    ScaleTick { function: FunctionId },
}

struct SimInstance {
    id: String,
    in_flight: u32,
    last_finished_us: u64,
    rng: ChaCha8Rng,
}

struct Queued {
    entry: u64,
    row: usize,
    enqueued_us: u64,
}

struct SimFunction {
    config: FunctionConfig,
    instances: BTreeMap<u64, SimInstance>,
    queue: VecDeque<Queued>,
    next_ordinal: u64,
    next_entry: u64,
    tracker: ScaleTracker,
    tick_pending: bool,
}

impl SimFunction {
    fn new(config: FunctionConfig) -> Self {
        Self {
            config,
            instances: BTreeMap::new(),
            queue: VecDeque::new(),
            next_ordinal: 0,
            next_entry: 0,
            tracker: ScaleTracker::new(),
            tick_pending: false,
        }
    }

    fn reap_idle(&mut self, now_us: u64) {
        let timeout_us = self.config.idle_timeout_ms * US_PER_MS;
        self.instances.retain(|_, inst| {
            inst.in_flight > 0 || now_us.saturating_sub(inst.last_finished_us) <= timeout_us
        });
    }

    fn loads(&self) -> Vec<InstanceLoad<'_>> {
        self.instances
            .values()
            .map(|inst| InstanceLoad {
                instance_id: inst.id.as_str(),
                in_flight: inst.in_flight,
                stopping: false,
            })
            .collect()
    }
}

struct Sim<'a> {
    model: &'a WorkerModel,
    trace: &'a [TraceRecord],
    settings: &'a ReplaySettings,
    functions: HashMap<FunctionId, SimFunction>,
    events: BinaryHeap<Reverse<(u64, u64)>>,
    payloads: HashMap<u64, Event>,
    seq: u64,
    results: Vec<ReplayedCall>,
    uncovered: BTreeMap<String, u64>,
}

impl<'a> Sim<'a> {
    fn push(&mut self, time_us: u64, event: Event) {
        let seq = self.seq;
        self.seq += 1;
        self.payloads.insert(seq, event);
        self.events.push(Reverse((time_us, seq)));
    }

    fn worker_utilization(&self) -> f64 {
        let mut total: u64 = 0;
        let mut count: u64 = 0;
        for f in self.functions.values() {
            for inst in f.instances.values() {
                total += u64::from(inst.in_flight);
                count += 1;
            }
        }
        if count == 0 {
            return 0.0;
        }
        let cap = count as f64 * f64::from(self.settings.reference_concurrency);
        (total as f64 / cap).min(1.0)
    }

    /// Per-instance mean in-flight for the function: the statistic the
    /// recorder attributes and therefore the model's feature.
    fn function_inflight(&self, function: &FunctionId) -> u32 {
        let Some(state) = self.functions.get(function) else { return 1 };
        let count = state.instances.len() as u64;
        if count == 0 {
            return 1;
        }
        let total: u64 = state.instances.values().map(|i| u64::from(i.in_flight)).sum();
        ((total as f64 / count as f64).round() as u32).max(1)
    }

    fn function_state(&mut self, function: &FunctionId) -> &mut SimFunction {
        if !self.functions.contains_key(function) {
            let config = self
                .settings
                .configs
                .get(function)
                .cloned()
                .unwrap_or_else(|| default_config(function));
            self.functions.insert(function.clone(), SimFunction::new(config));
        }
        self.functions.get_mut(function).unwrap()
    }

    fn new_instance(&mut self, function: &FunctionId, now_us: u64, initial_in_flight: u32) -> u64 {
        let seed = self.settings.seed;
        let state = self.functions.get_mut(function).expect("function state exists");
        let ordinal = state.next_ordinal;
        state.next_ordinal += 1;
        let stream = fnv1a(function.as_str()) ^ ordinal;
        state.instances.insert(
            ordinal,
            SimInstance {
                id: format!("i{ordinal:06}"),
                in_flight: initial_in_flight,
                last_finished_us: now_us,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, stream)),
            },
        );
        ordinal
    }

    fn dispatch(&mut self, now_us: u64, row: usize, ordinal: u64, cold: bool, queue_wait_us: u64) {
        let rec = &self.trace[row];
        let function = rec.function.clone();
        let utilization = self.worker_utilization();
        let inflight = self.function_inflight(&function);
        let state = self.functions.get_mut(&function).expect("function state exists");
        let exec_deadline_us = state.config.exec_deadline_ms * US_PER_MS;
        let inst = state.instances.get_mut(&ordinal).expect("instance exists");

        let (latency_ms, success) = emulate_invoke(
            self.model,
            &function,
            rec.payload_bytes,
            inflight,
            utilization,
            cold,
            &mut inst.rng,
        )
        .expect("covered function");
        let latency_us = (latency_ms * US_PER_MS as f64).round() as u64;

        let total_budget_us = self.settings.deadline_ms * US_PER_MS;
        let remaining_us = total_budget_us.saturating_sub(queue_wait_us);
        let budget_us = remaining_us.min(exec_deadline_us);

        let (exec_us, outcome) = if latency_us > budget_us {
            (budget_us, ReplayedOutcome::DeadlineExceeded)
        } else if success {
            (latency_us, ReplayedOutcome::Ok)
        } else {
            (latency_us, ReplayedOutcome::FunctionError)
        };
        self.push(
            now_us + exec_us,
            Event::Completion { function, ordinal, row, queue_wait_us, cold, exec_us, outcome },
        );
    }

    fn admit_arrival(&mut self, now_us: u64, row: usize) {
        let rec = &self.trace[row];
        let function = rec.function.clone();
        if !self.model.covers(&function) {
            *self.uncovered.entry(function.to_string()).or_insert(0) += 1;
            return;
        }
        let limits = self.settings.limits;
        let state = self.function_state(&function);
        state.reap_idle(now_us);
        let mode = state.config.concurrency;
        let queue_len = state.queue.len() as u32;
        let decision = admit(&mode, &state.loads(), queue_len, &limits);
        match decision {
            AdmissionDecision::Admit { instance_id } => {
                let ordinal = instance_id[1..].parse::<u64>().expect("sim instance id");
                let inst = state.instances.get_mut(&ordinal).expect("instance exists");
                inst.in_flight += 1;
                self.dispatch(now_us, row, ordinal, false, 0);
            }
            AdmissionDecision::StartNew => {
                let ordinal = self.new_instance(&function, now_us, 1);
                self.dispatch(now_us, row, ordinal, true, 0);
            }
            AdmissionDecision::Queue => {
                let entry = state.next_entry;
                state.next_entry += 1;
                state.queue.push_back(Queued { entry, row, enqueued_us: now_us });
                let deadline_us = now_us + self.settings.deadline_ms * US_PER_MS;
                self.push(deadline_us, Event::QueueDeadline { function, entry });
            }
            AdmissionDecision::Reject => {
                self.results.push(ReplayedCall {
                    row,
                    function,
                    queue_wait_ms: 0.0,
                    exec_ms: 0.0,
                    cold: false,
                    outcome: ReplayedOutcome::Overloaded,
                });
            }
        }
        self.ensure_tick(now_us, &rec.function.clone());
    }

    fn ensure_tick(&mut self, now_us: u64, function: &FunctionId) {
        let state = self.function_state(function);
        if let ConcurrencyMode::Unlimited { check_interval_ms, .. } = state.config.concurrency {
            if !state.tick_pending {
                state.tick_pending = true;
                let at = now_us + check_interval_ms * US_PER_MS;
                self.push(at, Event::ScaleTick { function: function.clone() });
            }
        }
    }

    fn pump_queue(&mut self, now_us: u64, function: &FunctionId) {
        loop {
            let limits = self.settings.limits;
            let state = match self.functions.get_mut(function) {
                Some(s) => s,
                None => return,
            };
            let Some(head) = state.queue.front() else { return };
            let head_row = head.row;
            let enqueued_us = head.enqueued_us;
            let mode = state.config.concurrency;
            match admit(&mode, &state.loads(), 0, &limits) {
                AdmissionDecision::Admit { instance_id } => {
                    state.queue.pop_front();
                    let ordinal = instance_id[1..].parse::<u64>().expect("sim instance id");
                    state.instances.get_mut(&ordinal).expect("instance exists").in_flight += 1;
                    self.dispatch(now_us, head_row, ordinal, false, now_us - enqueued_us);
                }
                AdmissionDecision::StartNew => {
                    state.queue.pop_front();
                    let ordinal = self.new_instance(function, now_us, 1);
                    self.dispatch(now_us, head_row, ordinal, true, now_us - enqueued_us);
                }
                AdmissionDecision::Queue | AdmissionDecision::Reject => return,
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_completion(
        &mut self,
        now_us: u64,
        function: FunctionId,
        ordinal: u64,
        row: usize,
        queue_wait_us: u64,
        cold: bool,
        exec_us: u64,
        outcome: ReplayedOutcome,
    ) {
        if let Some(state) = self.functions.get_mut(&function) {
            if let Some(inst) = state.instances.get_mut(&ordinal) {
                inst.in_flight = inst.in_flight.saturating_sub(1);
                inst.last_finished_us = now_us;
            }
        }
        self.results.push(ReplayedCall {
            row,
            function: function.clone(),
            queue_wait_ms: queue_wait_us as f64 / US_PER_MS as f64,
            exec_ms: exec_us as f64 / US_PER_MS as f64,
            cold,
            outcome,
        });
        self.pump_queue(now_us, &function);
    }

    fn on_queue_deadline(&mut self, function: FunctionId, entry: u64) {
        let Some(state) = self.functions.get_mut(&function) else { return };
        let Some(pos) = state.queue.iter().position(|q| q.entry == entry) else { return };
        let q = state.queue.remove(pos).expect("position valid");
        self.results.push(ReplayedCall {
            row: q.row,
            function,
            queue_wait_ms: self.settings.deadline_ms as f64,
            exec_ms: 0.0,
            cold: false,
            outcome: ReplayedOutcome::DeadlineExceeded,
        });
    }

    fn on_scale_tick(&mut self, now_us: u64, function: FunctionId) {
        let reference = f64::from(self.settings.reference_concurrency);
        let Some(state) = self.functions.get_mut(&function) else { return };
        state.tick_pending = false;
        let ConcurrencyMode::Unlimited { util_threshold, check_interval_ms } =
            state.config.concurrency
        else {
            return;
        };
        state.reap_idle(now_us);
        if state.instances.is_empty() && state.queue.is_empty() {
            return;
        }
        let readings: Vec<UtilReading> = state
            .instances
            .values()
            .map(|inst| UtilReading {
                instance_id: inst.id.clone(),
                in_flight: inst.in_flight,
                utilization: (f64::from(inst.in_flight) / reference).min(1.0),
            })
            .collect();
        let actions = state.tracker.check(util_threshold, &readings);
        for action in actions {
            match action {
                ScaleAction::StartReplica => {
                    self.new_instance(&function, now_us, 0);
                }
                ScaleAction::StopInstance { instance_id } => {
                    let ordinal = instance_id[1..].parse::<u64>().expect("sim instance id");
                    let state = self.functions.get_mut(&function).expect("state exists");
                    if state.instances.get(&ordinal).is_some_and(|i| i.in_flight == 0) {
                        state.instances.remove(&ordinal);
                    }
                }
            }
        }
        let state = self.functions.get_mut(&function).expect("state exists");
        state.tick_pending = true;
        self.push(now_us + check_interval_ms * US_PER_MS, Event::ScaleTick { function });
    }
}

/// Replay a trace's arrivals against a simulated emulated worker.
/// Returns per-row outcomes (row order) plus uncovered function counts.
pub fn replay_trace(
    model: &WorkerModel,
    trace: &[TraceRecord],
    settings: &ReplaySettings,
) -> (Vec<ReplayedCall>, BTreeMap<String, u64>) {
    let mut sim = Sim {
        model,
        trace,
        settings,
        functions: HashMap::new(),
        events: BinaryHeap::new(),
        payloads: HashMap::new(),
        seq: 0,
        results: Vec::new(),
        uncovered: BTreeMap::new(),
    };

    let t0 = trace.iter().map(|r| r.t_ms).min().unwrap_or(0);
    // arrivals pushed in row order so same-instant rows keep file order
    let mut order: Vec<usize> = (0..trace.len()).collect();
    order.sort_by_key(|&i| (trace[i].t_ms, i));
    for row in order {
        let at_us = (trace[row].t_ms - t0) * US_PER_MS;
        sim.push(at_us, Event::Arrival { row });
    }

    while let Some(Reverse((time_us, seq))) = sim.events.pop() {
        let event = sim.payloads.remove(&seq).expect("event payload");
        match event {
            Event::Arrival { row } => sim.admit_arrival(time_us, row),
            Event::Completion { function, ordinal, row, queue_wait_us, cold, exec_us, outcome } => {
                sim.on_completion(time_us, function, ordinal, row, queue_wait_us, cold, exec_us, outcome)
            }
            Event::QueueDeadline { function, entry } => sim.on_queue_deadline(function, entry),
            Event::ScaleTick { function } => sim.on_scale_tick(time_us, function),
        }
    }

    sim.results.sort_by_key(|r| r.row);
    (sim.results, sim.uncovered)
}

/// Fidelity of one function's emulation versus its recording.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionFidelity {
    pub recorded_calls: u64,
    pub replayed_calls: u64,
    pub recorded_median_ms: f64,
    pub replayed_median_ms: f64,
    /// |replayed - recorded| / recorded median latency.
    pub median_rel_err: f64,
    pub recorded_p95_ms: f64,
    pub replayed_p95_ms: f64,
    pub p95_rel_err: f64,
    pub recorded_failure_rate: f64,
    pub replayed_failure_rate: f64,
    pub failure_rate_abs_err: f64,
    /// Two-sample Kolmogorov-Smirnov statistic between the successful
    /// latency distributions.
    pub ks_stat: f64,
}

/// Report produced by [`evaluate_model`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityReport {
    pub model_version: String,
    pub seed: u64,
    pub per_function: BTreeMap<String, FunctionFidelity>,
    /// Functions present in the trace but absent from the model.
    pub uncovered: Vec<String>,
}

fn rel_err(observed: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if observed == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (observed - reference).abs() / reference
    }
}

/// Two-sample KS statistic: sup |F1 - F2| over the pooled sample.
pub fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.is_empty() && b.is_empty() { 0.0 } else { 1.0 };
    }
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let fa = i as f64 / a.len() as f64;
        let fb = j as f64 / b.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

/// Replay `trace` through a simulated emulated worker configured with
/// `model` and report how closely the emulation matches the recording.
pub fn evaluate_model(
    model: &WorkerModel,
    trace: &[TraceRecord],
    settings: &ReplaySettings,
) -> FidelityReport {
    let (replayed, uncovered_counts) = replay_trace(model, trace, settings);

    let mut recorded_by_fn: BTreeMap<String, Vec<&TraceRecord>> = BTreeMap::new();
    for rec in trace {
        recorded_by_fn.entry(rec.function.to_string()).or_default().push(rec);
    }
    let mut replayed_by_fn: BTreeMap<String, Vec<&ReplayedCall>> = BTreeMap::new();
    for call in &replayed {
        replayed_by_fn.entry(call.function.to_string()).or_default().push(call);
    }

    let mut per_function = BTreeMap::new();
    for (name, recorded) in &recorded_by_fn {
        if uncovered_counts.contains_key(name) {
            continue;
        }
        let replayed = replayed_by_fn.get(name).map(Vec::as_slice).unwrap_or(&[]);

        let mut rec_lat: Vec<f64> =
            recorded.iter().filter(|r| r.success).map(|r| r.exec_ms as f64).collect();
        let mut rep_lat: Vec<f64> =
            replayed.iter().filter(|r| r.outcome.is_ok()).map(|r| r.exec_ms).collect();
        rec_lat.sort_by(|x, y| x.partial_cmp(y).unwrap());
        rep_lat.sort_by(|x, y| x.partial_cmp(y).unwrap());

        let rec_median = nearest_rank(&rec_lat, 0.50).unwrap_or(0.0);
        let rep_median = nearest_rank(&rep_lat, 0.50).unwrap_or(0.0);
        let rec_p95 = nearest_rank(&rec_lat, 0.95).unwrap_or(0.0);
        let rep_p95 = nearest_rank(&rep_lat, 0.95).unwrap_or(0.0);

        let rec_fail = if recorded.is_empty() {
            0.0
        } else {
            recorded.iter().filter(|r| !r.success).count() as f64 / recorded.len() as f64
        };
        let rep_fail = if replayed.is_empty() {
            0.0
        } else {
            replayed.iter().filter(|r| !r.outcome.is_ok()).count() as f64 / replayed.len() as f64
        };

        per_function.insert(
            name.clone(),
            FunctionFidelity {
                recorded_calls: recorded.len() as u64,
                replayed_calls: replayed.len() as u64,
                recorded_median_ms: rec_median,
                replayed_median_ms: rep_median,
                median_rel_err: rel_err(rep_median, rec_median),
                recorded_p95_ms: rec_p95,
                replayed_p95_ms: rep_p95,
                p95_rel_err: rel_err(rep_p95, rec_p95),
                recorded_failure_rate: rec_fail,
                replayed_failure_rate: rep_fail,
                failure_rate_abs_err: (rep_fail - rec_fail).abs(),
                ks_stat: ks_statistic(&mut rec_lat, &mut rep_lat),
            },
        );
    }

    FidelityReport {
        model_version: model.model_version.clone(),
        seed: settings.seed,
        per_function,
        uncovered: uncovered_counts.into_keys().collect(),
    }
}
