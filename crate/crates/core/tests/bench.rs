//! Load generator semantics and the topology runner.

mod common;

use std::collections::HashSet;
use std::sync::Arc;

use common::{config, emulated_worker, fid, model, stores};
use faastree_core::bench::{
    build_report, generate, run_topology, ArrivalKind, BenchError, LoadProfile, Pattern, Phase,
    TopologyConfig,
};
use faastree_core::protocol::transport::{NodeHandle, TcpNodeClient};
use faastree_core::protocol::types::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn closed(workers: u32, calls: u32, seed: u64) -> LoadProfile {
    LoadProfile {
        phases: vec![Phase {
            function: fid("echo"),
            pattern: Pattern::ClosedLoop { workers, calls_per_worker: calls },
            payload_bytes: 32,
            seed,
        }],
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn closed_loop_single_worker_is_sequential() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::HardLimit { limit: 8 }, 60_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 10.0, 0.0, 0.0, 0.0, 0.0), 1);

    let rows = generate(worker, &closed(1, 10, 3)).await.unwrap();
    assert_eq!(rows.len(), 10);
    for pair in rows.windows(2) {
        assert!(
            pair[1].start_t_ms >= pair[0].end_t_ms,
            "closed loop must wait for the previous response"
        );
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn open_loop_uniform_schedules_exactly() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::HardLimit { limit: 64 }, 60_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 1.0, 0.0, 0.0, 0.0, 0.0), 1);

    let profile = LoadProfile {
        phases: vec![Phase {
            function: fid("echo"),
            pattern: Pattern::OpenLoop {
                rate_per_s: 100.0,
                duration_ms: 1000,
                arrivals: ArrivalKind::Uniform,
            },
            payload_bytes: 0,
            seed: 5,
        }],
    };
    let rows = generate(worker, &profile).await.unwrap();
    assert_eq!(rows.len(), 100, "exactly rate * duration arrivals");
    // scheduled instants are 10 ms apart
    let scheds: Vec<u64> = rows.iter().map(|r| r.sched_t_ms).collect();
    for pair in scheds.windows(2) {
        let gap = pair[1] - pair[0];
        assert!(gap == 10, "uniform spacing violated: {gap}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn open_loop_does_not_block_on_slow_responses() {
    let st = stores();
    // 300 ms latency, Single mode, tiny capacity: open loop must still
    // fire every arrival and record failures as rows
    let cfg = config("echo", ConcurrencyMode::Single, 60_000);
    st.configs.put(&cfg).unwrap();
    let mut opts = faastree_core::worker::WorkerOptions::new("w1");
    opts.limits.max_instances_per_function = 1;
    opts.limits.queue_cap = 2;
    let worker = faastree_core::worker::WorkerNode::new(
        opts,
        Arc::new(faastree_core::worker::EmulatedRuntime::new(
            Arc::new(model("echo", 300.0, 0.0, 0.0, 0.0, 0.0)),
            1,
        )),
        st.configs.clone(),
        st.images.clone(),
    );

    let profile = LoadProfile {
        phases: vec![Phase {
            function: fid("echo"),
            pattern: Pattern::OpenLoop {
                rate_per_s: 50.0,
                duration_ms: 1000,
                arrivals: ArrivalKind::Uniform,
            },
            payload_bytes: 0,
            seed: 6,
        }],
    };
    let rows = generate(worker, &profile).await.unwrap();
    assert_eq!(rows.len(), 50, "every scheduled call produced a row");
    let overloaded = rows.iter().filter(|r| r.code == Some(ErrorCode::Overloaded)).count();
    assert!(overloaded > 0, "overload must be observable, not masked");
    let report = build_report(&rows);
    assert_eq!(report.overall.count, 50);
    assert_eq!(
        report.overall.count,
        report.overall.success_count + report.overall.errors.values().sum::<u64>()
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn conservation_rows_equal_schedule() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::HardLimit { limit: 64 }, 60_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 2.0, 0.0, 1.0, 0.0, 0.1), 1);

    let profile = LoadProfile {
        phases: vec![
            Phase {
                function: fid("echo"),
                pattern: Pattern::ClosedLoop { workers: 3, calls_per_worker: 40 },
                payload_bytes: 16,
                seed: 1,
            },
            Phase {
                function: fid("echo"),
                pattern: Pattern::OpenLoop {
                    rate_per_s: 200.0,
                    duration_ms: 800,
                    arrivals: ArrivalKind::Poisson,
                },
                payload_bytes: 16,
                seed: 2,
            },
        ],
    };
    let rows = generate(worker, &profile).await.unwrap();
    assert_eq!(rows.len() as u64, profile.total_calls());
    let ids: HashSet<&str> = rows.iter().map(|r| r.call_id.as_str()).collect();
    assert_eq!(ids.len(), rows.len(), "call ids unique");
}

fn topology_json(image_root: &str, config_root: &str, model_path: &str) -> String {
    format!(
        r#"{{
  "nodes": [
    {{"id": "root", "kind": "leaf", "strategy": {{"type": "round_robin"}},
      "children": ["w1"], "listen": "127.0.0.1:0"}},
    {{"id": "w1", "kind": "worker", "runtime": "emulated", "model": "{model_path}"}}
  ],
  "functions": [
    {{"function": "echo", "image_digest": "{digest}",
      "memory_limit_mb": 128, "cpu_millis": 1000,
      "concurrency": {{"mode": "hard_limit", "limit": 8}},
      "idle_timeout_ms": 5000, "exec_deadline_ms": 30000}}
  ],
  "stores": {{"image_root": "{image_root}", "config_root": "{config_root}"}}
}}"#,
        digest = "0".repeat(64),
    )
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn minimal_topology_serves_calls_in_process_and_over_tcp() {
    let st = stores();
    let model_path = st.dir.path().join("model.json");
    model("echo", 5.0, 0.0, 0.0, 0.0, 0.0).save(&model_path).unwrap();

    let json = topology_json(
        st.dir.path().to_str().unwrap(),
        st.dir.path().to_str().unwrap(),
        model_path.to_str().unwrap(),
    );
    let cfg: TopologyConfig = serde_json::from_str(&json).unwrap();
    cfg.validate().unwrap();
    let running = run_topology(&cfg).await.unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let req = CallRequest::new(fid("echo"), b"smoke".to_vec(), 10_000, &mut rng);
    let resp = running.root.call(req).await.unwrap();
    assert!(resp.outcome.is_ok(), "{:?}", resp.outcome);
    assert_eq!(resp.worker_id, "w1");

    // same tree reachable over its published TCP address
    let addr = running.root_addr.expect("root listens");
    let client = TcpNodeClient::new(addr.to_string());
    let req = CallRequest::new(fid("echo"), b"smoke2".to_vec(), 10_000, &mut rng);
    let resp = client.call(req).await.unwrap();
    assert!(resp.outcome.is_ok());

    running.shutdown().await;
}

#[tokio::test]
async fn topology_validation_failures_are_config_invalid() {
    let bad = r#"{
        "nodes": [{"id": "a", "kind": "balancer", "children": ["a"]}],
        "functions": [],
        "stores": {"image_root": "/tmp/i", "config_root": "/tmp/c"}
    }"#;
    let cfg: TopologyConfig = serde_json::from_str(bad).unwrap();
    match cfg.validate() {
        Err(BenchError::ConfigInvalid(msg)) => assert!(msg.contains("cycle"), "{msg}"),
        other => panic!("expected ConfigInvalid, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn report_is_a_pure_function_of_rows() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::HardLimit { limit: 8 }, 60_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 3.0, 0.0, 1.0, 0.0, 0.0), 1);
    let rows = generate(worker, &closed(2, 20, 9)).await.unwrap();
    let a = serde_json::to_string(&build_report(&rows)).unwrap();
    let b = serde_json::to_string(&build_report(&rows)).unwrap();
    assert_eq!(a, b);
}
