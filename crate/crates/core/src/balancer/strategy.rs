//! Routing strategies: pick one child for each incoming call.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::protocol::types::{CallRequest, ConcurrencyMode};

use super::{RoutingView, SnapshotEntry};

/// Pluggable child-selection algorithm. Random and RoundRobin are
/// stateless with respect to outcomes; LeastInFlight and WarmFirst read
/// worker snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Random { seed: u64 },
    RoundRobin,
    LeastInFlight,
    WarmFirst { fallback_seed: u64 },
}

/// Mutable per-node strategy state: the seeded generator and the
/// round-robin counter. Updates are serialized by the owning node.
#[derive(Debug)]
pub struct StrategyState {
    rng: Option<ChaCha8Rng>,
    next_index: u64,
}

impl Strategy {
    pub fn new_state(&self) -> StrategyState {
        let rng = match self {
            Strategy::Random { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
            Strategy::WarmFirst { fallback_seed } => Some(ChaCha8Rng::seed_from_u64(*fallback_seed)),
            _ => None,
        };
        StrategyState { rng, next_index: 0 }
    }

    /// True when routing wants fresh worker snapshots.
    pub fn uses_state(&self) -> bool {
        matches!(self, Strategy::LeastInFlight | Strategy::WarmFirst { .. })
    }
}

fn fresh_snapshot<'a>(
    view: &'a RoutingView,
    child_id: &str,
    now_ms: u64,
) -> Option<&'a SnapshotEntry> {
    let entry = view.snapshots.get(child_id)?;
    // entries older than the ttl are treated as absent
    if now_ms.saturating_sub(entry.fetched_at_ms) > view.snapshot_ttl_ms {
        return None;
    }
    Some(entry)
}

fn total_in_flight(view: &RoutingView, child_id: &str, now_ms: u64) -> u64 {
    fresh_snapshot(view, child_id, now_ms).map(|e| e.snapshot.total_in_flight()).unwrap_or(0)
}

/// Does this instance have room for one more call under its function's
/// mode? Unknown modes count as having room.
fn has_spare_capacity(in_flight: u64, mode: Option<&ConcurrencyMode>) -> bool {
    match mode.and_then(|m| m.admission_limit()) {
        Some(limit) => in_flight < u64::from(limit),
        None => true,
    }
}

fn pick_random(state: &mut StrategyState, n: usize) -> usize {
    let rng = state.rng.as_mut().expect("random strategy has an rng");
    rng.gen_range(0..n)
}

fn pick_least_in_flight(view: &RoutingView, candidates: &[usize], now_ms: u64) -> usize {
    *candidates
        .iter()
        .min_by_key(|&&i| (total_in_flight(view, &view.children[i], now_ms), &view.children[i]))
        .expect("candidates non-empty")
}

/// Select a child index. `view.children` must be non-empty.
///
/// Identical inputs and identical strategy state give identical picks,
/// including the seeded Random stream, so routed runs can be replayed.
pub fn route(
    req: &CallRequest,
    view: &RoutingView,
    strategy: &Strategy,
    state: &mut StrategyState,
    now_ms: u64,
) -> usize {
    let n = view.children.len();
    assert!(n > 0, "route requires at least one child");
    let all: Vec<usize> = (0..n).collect();
    match strategy {
        Strategy::Random { .. } => pick_random(state, n),
        Strategy::RoundRobin => {
            let i = (state.next_index % n as u64) as usize;
            state.next_index += 1;
            i
        }
        Strategy::LeastInFlight => pick_least_in_flight(view, &all, now_ms),
        Strategy::WarmFirst { .. } => {
            let mode = view.concurrency_modes.get(&req.function);
            let warm: Vec<usize> = (0..n)
                .filter(|&i| {
                    fresh_snapshot(view, &view.children[i], now_ms).is_some_and(|entry| {
                        entry
                            .snapshot
                            .instances_of(&req.function)
                            .any(|inst| has_spare_capacity(inst.in_flight, mode))
                    })
                })
                .collect();
            if warm.is_empty() {
                pick_random(state, n)
            } else {
                pick_least_in_flight(view, &warm, now_ms)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::types::{
        FunctionId, InstanceSnapshot, InstanceStatus, WorkerSnapshot,
    };
    use std::collections::HashMap;

    fn fid(name: &str) -> FunctionId {
        FunctionId::new(name).unwrap()
    }

    fn req(name: &str) -> CallRequest {
        CallRequest {
            call_id: "00112233445566778899aabbccddeeff".into(),
            function: fid(name),
            payload: Vec::new(),
            deadline_ms: 1000,
        }
    }

    fn snapshot(worker: &str, f: &str, in_flights: &[u64]) -> WorkerSnapshot {
        WorkerSnapshot {
            worker_id: worker.to_string(),
            taken_at_ms: 0,
            instances: in_flights
                .iter()
                .enumerate()
                .map(|(i, &n)| InstanceSnapshot {
                    instance_id: format!("i{i:06}"),
                    function: fid(f),
                    status: if n > 0 { InstanceStatus::Busy } else { InstanceStatus::Idle },
                    in_flight: n,
                    started_at_ms: 0,
                })
                .collect(),
            utilization: 0.0,
        }
    }

    fn view(children: &[&str]) -> RoutingView {
        RoutingView {
            children: children.iter().map(|s| s.to_string()).collect(),
            snapshots: HashMap::new(),
            snapshot_ttl_ms: 1000,
            concurrency_modes: HashMap::new(),
        }
    }

    fn with_snapshot(mut v: RoutingView, child: &str, snap: WorkerSnapshot, at: u64) -> RoutingView {
        v.snapshots.insert(child.to_string(), SnapshotEntry { snapshot: snap, fetched_at_ms: at });
        v
    }

    #[test]
    fn single_child_always_wins() {
        let v = view(&["only"]);
        let strategies = [
            Strategy::Random { seed: 1 },
            Strategy::RoundRobin,
            Strategy::LeastInFlight,
            Strategy::WarmFirst { fallback_seed: 1 },
        ];
        for s in strategies {
            let mut st = s.new_state();
            assert_eq!(route(&req("echo"), &v, &s, &mut st, 0), 0);
        }
    }

    #[test]
    fn round_robin_cycles_in_order() {
        let v = view(&["a", "b", "c"]);
        let s = Strategy::RoundRobin;
        let mut st = s.new_state();
        let picks: Vec<usize> = (0..6).map(|_| route(&req("echo"), &v, &s, &mut st, 0)).collect();
        assert_eq!(picks, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn least_in_flight_ties_break_lexicographically() {
        let v = view(&["a", "b", "c"]);
        let v = with_snapshot(v, "a", snapshot("a", "echo", &[3]), 0);
        let v = with_snapshot(v, "b", snapshot("b", "echo", &[1]), 0);
        let v = with_snapshot(v, "c", snapshot("c", "echo", &[1]), 0);
        let s = Strategy::LeastInFlight;
        let mut st = s.new_state();
        assert_eq!(route(&req("echo"), &v, &s, &mut st, 0), 1, "b wins the tie");
    }

    #[test]
    fn least_in_flight_missing_snapshot_counts_as_zero() {
        let v = view(&["a", "b"]);
        let v = with_snapshot(v, "a", snapshot("a", "echo", &[1]), 0);
        let s = Strategy::LeastInFlight;
        let mut st = s.new_state();
        assert_eq!(route(&req("echo"), &v, &s, &mut st, 0), 1);
    }

    #[test]
    fn stale_snapshots_are_absent() {
        let v = view(&["a", "b"]);
        // fetched at t=0, ttl 1000, asked at t=2000: stale
        let v = with_snapshot(v, "a", snapshot("a", "echo", &[0]), 0);
        let s = Strategy::WarmFirst { fallback_seed: 7 };
        let mut st = s.new_state();
        // no fresh warm child: falls back to random, which can pick either
        let pick = route(&req("echo"), &v, &s, &mut st, 2000);
        assert!(pick < 2);
    }

    #[test]
    fn warm_first_prefers_warm_with_spare_capacity() {
        let mut v = view(&["a", "b", "c"]);
        v.concurrency_modes.insert(fid("echo"), ConcurrencyMode::HardLimit { limit: 2 });
        // a: instance full (2/2); b: instance with room; c: no snapshot
        let v = with_snapshot(v, "a", snapshot("a", "echo", &[2]), 0);
        let v = with_snapshot(v, "b", snapshot("b", "echo", &[1]), 0);
        let s = Strategy::WarmFirst { fallback_seed: 7 };
        let mut st = s.new_state();
        assert_eq!(route(&req("echo"), &v, &s, &mut st, 0), 1);
    }

    #[test]
    fn warm_first_ignores_other_functions() {
        let v = view(&["a", "b"]);
        let v = with_snapshot(v, "a", snapshot("a", "other", &[0]), 0);
        let s = Strategy::WarmFirst { fallback_seed: 3 };
        let mut st = s.new_state();
        // "a" is warm for a different function only: random fallback
        let mut picked_b = false;
        for _ in 0..32 {
            if route(&req("echo"), &v, &s, &mut st, 0) == 1 {
                picked_b = true;
            }
        }
        assert!(picked_b, "fallback should reach both children");
    }

    #[test]
    fn seeded_random_replays_identically() {
        let v = view(&["a", "b", "c", "d"]);
        let s = Strategy::Random { seed: 42 };
        let run = || {
            let mut st = s.new_state();
            (0..100).map(|_| route(&req("echo"), &v, &s, &mut st, 0)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
