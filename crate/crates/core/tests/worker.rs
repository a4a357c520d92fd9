//! Worker lifecycle and concurrency-policy behavior.

mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{config, emulated_worker, fid, model, stores};
use faastree_core::protocol::types::*;
use faastree_core::worker::{InstrumentedRuntime, ProcessRuntime, WorkerNode, WorkerOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn request(name: &str, rng: &mut ChaCha8Rng) -> CallRequest {
    CallRequest::new(fid(name), b"hello".to_vec(), 30_000, rng)
}

fn request_with_deadline(name: &str, deadline_ms: u64, rng: &mut ChaCha8Rng) -> CallRequest {
    CallRequest::new(fid(name), b"hello".to_vec(), deadline_ms, rng)
}

#[tokio::test]
async fn first_call_is_cold_second_is_warm() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::Single, 5_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 5.0, 0.0, 0.0, 0.0, 0.0), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let first = worker.handle_call(request("echo", &mut rng)).await;
    assert!(first.outcome.is_ok(), "{:?}", first.outcome);
    assert!(first.cold_start);
    assert_eq!(first.worker_id, "w1");

    let second = worker.handle_call(request("echo", &mut rng)).await;
    assert!(second.outcome.is_ok());
    assert!(!second.cold_start);
}

#[tokio::test]
async fn unregistered_function_is_not_found() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::Single, 5_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 5.0, 0.0, 0.0, 0.0, 0.0), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let resp = worker.handle_call(request("ghost", &mut rng)).await;
    assert_eq!(resp.outcome.code(), Some(ErrorCode::NotFound));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn two_concurrent_single_mode_calls_make_two_instances() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::Single, 5_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 50.0, 0.0, 0.0, 0.0, 0.0), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let a = worker.handle_call(request("echo", &mut rng));
    let b = worker.handle_call(request("echo", &mut rng));
    let (ra, rb) = tokio::join!(a, b);
    assert!(ra.outcome.is_ok() && rb.outcome.is_ok());

    let snap = worker.snapshot();
    assert_eq!(snap.instances.len(), 2, "single mode forces a replica: {snap:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn hard_limit_packs_calls_onto_instances() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::HardLimit { limit: 2 }, 5_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 200.0, 0.0, 0.0, 0.0, 0.0), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut calls = Vec::new();
    for _ in 0..3 {
        let worker = Arc::clone(&worker);
        let req = request("echo", &mut rng);
        calls.push(tokio::spawn(async move { worker.handle_call(req).await }));
    }

    // wait until all three are admitted, then inspect in-flight packing
    let mut packed = None;
    for _ in 0..200 {
        let snap = worker.snapshot();
        if snap.total_in_flight() == 3 {
            let mut counts: Vec<u64> = snap.instances.iter().map(|i| i.in_flight).collect();
            counts.sort_unstable();
            packed = Some(counts);
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    assert_eq!(packed, Some(vec![1, 2]), "bin-packing should fill one instance to its limit");

    for call in calls {
        assert!(call.await.unwrap().outcome.is_ok());
    }
    let (snap, (admitted, completed, failed)) = worker.snapshot_with_accounting();
    assert_eq!(admitted, 3);
    assert_eq!(completed, 3);
    assert_eq!(failed, 0);
    assert_eq!(snap.total_in_flight(), 0);
    assert!(snap.instances.iter().all(|i| i.status == InstanceStatus::Idle));
}

#[tokio::test]
async fn missing_image_blob_fails_instance_start() {
    let st = stores();
    // config points at a digest that was never put
    let cfg = config("echo", ConcurrencyMode::Single, 5_000);
    st.configs.put(&cfg).unwrap();
    let scratch = st.dir.path().join("scratch");
    let worker = WorkerNode::new(
        WorkerOptions::new("w1"),
        Arc::new(ProcessRuntime::new(scratch).unwrap()),
        st.configs.clone(),
        st.images.clone(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let resp = worker.handle_call(request("echo", &mut rng)).await;
    assert_eq!(resp.outcome.code(), Some(ErrorCode::InstanceStartFailed), "{:?}", resp.outcome);
}

#[tokio::test]
async fn tight_deadline_against_slow_model_exceeds() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::Single, 5_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 50.0, 0.0, 0.0, 0.0, 0.0), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let resp = worker.handle_call(request_with_deadline("echo", 1, &mut rng)).await;
    assert_eq!(resp.outcome.code(), Some(ErrorCode::DeadlineExceeded));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn exhausted_capacity_rejects_with_overloaded() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::Single, 5_000);
    st.configs.put(&cfg).unwrap();
    let mut opts = WorkerOptions::new("w1");
    opts.limits.max_instances_per_function = 1;
    opts.limits.queue_cap = 0;
    let worker = WorkerNode::new(
        opts,
        Arc::new(faastree_core::worker::EmulatedRuntime::new(
            Arc::new(model("echo", 300.0, 0.0, 0.0, 0.0, 0.0)),
            1,
        )),
        st.configs.clone(),
        st.images.clone(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let slow = tokio::spawn({
        let worker = Arc::clone(&worker);
        let req = request("echo", &mut rng);
        async move { worker.handle_call(req).await }
    });
    // wait for the first call to occupy the only slot
    for _ in 0..100 {
        if worker.snapshot().total_in_flight() == 1 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let resp = worker.handle_call(request("echo", &mut rng)).await;
    assert_eq!(resp.outcome.code(), Some(ErrorCode::Overloaded));
    assert!(slow.await.unwrap().outcome.is_ok());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn queued_call_runs_after_capacity_frees() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::Single, 5_000);
    st.configs.put(&cfg).unwrap();
    let mut opts = WorkerOptions::new("w1");
    opts.limits.max_instances_per_function = 1;
    opts.limits.queue_cap = 8;
    let worker = WorkerNode::new(
        opts,
        Arc::new(faastree_core::worker::EmulatedRuntime::new(
            Arc::new(model("echo", 100.0, 0.0, 0.0, 0.0, 0.0)),
            1,
        )),
        st.configs.clone(),
        st.images.clone(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let first = tokio::spawn({
        let worker = Arc::clone(&worker);
        let req = request("echo", &mut rng);
        async move { worker.handle_call(req).await }
    });
    for _ in 0..100 {
        if worker.snapshot().total_in_flight() == 1 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let second = worker.handle_call(request("echo", &mut rng)).await;
    assert!(second.outcome.is_ok(), "{:?}", second.outcome);
    assert!(second.queue_wait_ms >= 50, "queued call should have waited: {second:?}");
    assert!(!second.cold_start, "reuses the drained instance");
    assert!(first.await.unwrap().outcome.is_ok());
}

#[tokio::test]
async fn idle_instances_are_reaped_after_timeout() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::Single, 400);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 1.0, 0.0, 0.0, 0.0, 0.0), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let resp = worker.handle_call(request("echo", &mut rng)).await;
    assert!(resp.outcome.is_ok());
    assert_eq!(worker.snapshot().instances.len(), 1);

    // 400 ms timeout, reaper period 100 ms: gone well before 1 s
    tokio::time::sleep(Duration::from_millis(900)).await;
    assert_eq!(worker.snapshot().instances.len(), 0, "idle instance should be reaped");

    let resp = worker.handle_call(request("echo", &mut rng)).await;
    assert!(resp.cold_start, "call after reap is cold again");
}

#[tokio::test]
async fn busy_instances_are_never_reaped() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::Single, 100);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 700.0, 0.0, 0.0, 0.0, 0.0), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // long call with a short idle timeout: reaper must leave it alone
    let resp = worker.handle_call(request("echo", &mut rng)).await;
    assert!(resp.outcome.is_ok(), "{:?}", resp.outcome);
    assert!(resp.exec_ms >= 600);
}

#[tokio::test]
async fn stop_function_removes_instances_and_next_call_is_cold() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::HardLimit { limit: 4 }, 60_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 1.0, 0.0, 0.0, 0.0, 0.0), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    worker.handle_call(request("echo", &mut rng)).await;
    worker.handle_call(request("echo", &mut rng)).await;
    assert!(!worker.snapshot().instances.is_empty());

    worker.handle_stop(&StopRequest { target: StopTarget::Function(fid("echo")) }).unwrap();
    for _ in 0..100 {
        if worker.snapshot().instances.is_empty() {
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    assert!(worker.snapshot().instances.is_empty());

    let resp = worker.handle_call(request("echo", &mut rng)).await;
    assert!(resp.cold_start);
}

#[tokio::test]
async fn stop_unknown_instance_is_not_found() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::Single, 5_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 1.0, 0.0, 0.0, 0.0, 0.0), 1);
    let err = worker
        .handle_stop(&StopRequest { target: StopTarget::Instance("zzz".into()) })
        .unwrap_err();
    assert_eq!(err.code, ErrorCode::NotFound);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn stop_during_short_call_lets_it_drain() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::Single, 60_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 100.0, 0.0, 0.0, 0.0, 0.0), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let call = tokio::spawn({
        let worker = Arc::clone(&worker);
        let req = request("echo", &mut rng);
        async move { worker.handle_call(req).await }
    });
    for _ in 0..100 {
        if worker.snapshot().total_in_flight() == 1 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    worker.handle_stop(&StopRequest { target: StopTarget::Function(fid("echo")) }).unwrap();
    let resp = call.await.unwrap();
    assert!(resp.outcome.is_ok(), "in-flight call inside drain window completes: {:?}", resp.outcome);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn unlimited_mode_grows_replicas_under_load() {
    let st = stores();
    let cfg = config(
        "echo",
        ConcurrencyMode::Unlimited { util_threshold: 0.5, check_interval_ms: 50 },
        60_000,
    );
    st.configs.put(&cfg).unwrap();
    let runtime = Arc::new(InstrumentedRuntime::new(
        Duration::from_millis(40),
        Duration::from_millis(1),
    ));
    let worker = WorkerNode::new(
        WorkerOptions::new("w1"),
        Arc::clone(&runtime) as Arc<dyn faastree_core::worker::runtime::Runtime>,
        st.configs.clone(),
        st.images.clone(),
    );

    // closed loop of 32 callers for ~1.5 s keeps utilization above the
    // threshold (in-flight proxy: 32 / 16 reference > 0.5)
    let mut handles = Vec::new();
    for i in 0..32u64 {
        let worker = Arc::clone(&worker);
        handles.push(tokio::spawn(async move {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let start = std::time::Instant::now();
            while start.elapsed() < Duration::from_millis(1500) {
                let req = CallRequest::new(fid("echo"), Vec::new(), 10_000, &mut rng);
                worker.handle_call(req).await;
            }
        }));
    }
    for h in handles {
        h.await.ok();
    }
    assert!(
        runtime.instances_started() > 1,
        "sustained load above the threshold should add replicas, got {}",
        runtime.instances_started()
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn unlimited_mode_scales_down_when_idle_unless_disabled() {
    async fn replica_count_after_idle(scale_down: bool) -> usize {
        let st = stores();
        let cfg = config(
            "echo",
            ConcurrencyMode::Unlimited { util_threshold: 0.5, check_interval_ms: 40 },
            60_000,
        );
        st.configs.put(&cfg).unwrap();
        let runtime = Arc::new(InstrumentedRuntime::new(
            Duration::from_millis(30),
            Duration::from_millis(1),
        ));
        let mut opts = WorkerOptions::new("w1");
        opts.scale_down = scale_down;
        let worker = WorkerNode::new(
            opts,
            Arc::clone(&runtime) as Arc<dyn faastree_core::worker::runtime::Runtime>,
            st.configs.clone(),
            st.images.clone(),
        );

        // grow replicas under load, then go idle
        let mut handles = Vec::new();
        for i in 0..24u64 {
            let worker = Arc::clone(&worker);
            handles.push(tokio::spawn(async move {
                let mut rng = ChaCha8Rng::seed_from_u64(i);
                let start = std::time::Instant::now();
                while start.elapsed() < Duration::from_millis(800) {
                    let req = CallRequest::new(fid("echo"), Vec::new(), 10_000, &mut rng);
                    worker.handle_call(req).await;
                }
            }));
        }
        for h in handles {
            h.await.unwrap();
        }
        assert!(worker.snapshot().instances.len() > 1, "load should have grown replicas");

        tokio::time::sleep(Duration::from_millis(1200)).await;
        worker.snapshot().instances.len()
    }

    assert_eq!(replica_count_after_idle(true).await, 1, "surplus idle replicas stopped");
    assert!(replica_count_after_idle(false).await > 1, "scale-down disabled keeps replicas");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn accounting_is_conserved_under_concurrency() {
    let st = stores();
    let cfg = config("echo", ConcurrencyMode::HardLimit { limit: 4 }, 60_000);
    let worker = emulated_worker("w1", &st, &cfg, model("echo", 10.0, 0.0, 2.0, 0.0, 0.05), 7);

    let mut handles = Vec::new();
    for i in 0..16u64 {
        let worker = Arc::clone(&worker);
        handles.push(tokio::spawn(async move {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            for _ in 0..20 {
                let req = CallRequest::new(fid("echo"), Vec::new(), 10_000, &mut rng);
                worker.handle_call(req).await;
            }
        }));
    }

    // admitted - completed - failed must equal total in-flight at every
    // observation point
    for _ in 0..50 {
        let (snap, (admitted, completed, failed)) = worker.snapshot_with_accounting();
        assert_eq!(
            admitted - completed - failed,
            snap.total_in_flight(),
            "accounting conservation violated"
        );
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    for h in handles {
        h.await.unwrap();
    }
    let (snap, (admitted, completed, failed)) = worker.snapshot_with_accounting();
    assert_eq!(admitted, 320);
    assert_eq!(completed + failed, 320);
    assert_eq!(snap.total_in_flight(), 0);
}
