use std::collections::HashMap;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use faastree_bench::sample_request;
use faastree_core::balancer::{route, RoutingView, SnapshotEntry, Strategy};
use faastree_core::protocol::types::{
    FunctionId, InstanceSnapshot, InstanceStatus, WorkerSnapshot,
};

fn view(children: usize) -> RoutingView {
    let ids: Vec<String> = (0..children).map(|i| format!("w{i:03}")).collect();
    let snapshots: HashMap<String, SnapshotEntry> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let snapshot = WorkerSnapshot {
                worker_id: id.clone(),
                taken_at_ms: 0,
                instances: vec![InstanceSnapshot {
                    instance_id: "i000000".into(),
                    function: FunctionId::new("echo").unwrap(),
                    status: if i % 2 == 0 { InstanceStatus::Busy } else { InstanceStatus::Idle },
                    in_flight: if i % 2 == 0 { (i % 7) as u64 + 1 } else { 0 },
                    started_at_ms: 0,
                }],
                utilization: 0.1,
            };
            (id.clone(), SnapshotEntry { snapshot, fetched_at_ms: 0 })
        })
        .collect();
    RoutingView { children: ids, snapshots, snapshot_ttl_ms: u64::MAX / 2, concurrency_modes: HashMap::new() }
}

fn bench_strategies(c: &mut Criterion) {
    let req = sample_request(0);
    let mut group = c.benchmark_group("route");
    for children in [4usize, 64] {
        let v = view(children);
        for (name, strategy) in [
            ("random", Strategy::Random { seed: 1 }),
            ("round_robin", Strategy::RoundRobin),
            ("least_in_flight", Strategy::LeastInFlight),
            ("warm_first", Strategy::WarmFirst { fallback_seed: 1 }),
        ] {
            let mut state = strategy.new_state();
            group.bench_with_input(
                BenchmarkId::new(name, children),
                &strategy,
                |b, strategy| {
                    b.iter(|| route(black_box(&req), black_box(&v), strategy, &mut state, 0));
                },
            );
        }
    }
    group.finish();
}

criterion_group!(benches, bench_strategies);
criterion_main!(benches);
