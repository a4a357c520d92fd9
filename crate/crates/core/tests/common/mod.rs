//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use faastree_core::emulator::{FunctionModel, WorkerModel};
use faastree_core::protocol::types::{ConcurrencyMode, FunctionConfig, FunctionId};
use faastree_core::registry::{ConfigStore, ImageStore};
use faastree_core::worker::{EmulatedRuntime, WorkerNode, WorkerOptions};
use tempfile::TempDir;

pub fn fid(name: &str) -> FunctionId {
    FunctionId::new(name).unwrap()
}

pub struct Stores {
    pub dir: TempDir,
    pub configs: ConfigStore,
    pub images: ImageStore,
}

pub fn stores() -> Stores {
    let dir = tempfile::tempdir().unwrap();
    let configs = ConfigStore::open(dir.path()).unwrap();
    let images = ImageStore::open(dir.path()).unwrap();
    Stores { dir, configs, images }
}

pub fn config(name: &str, concurrency: ConcurrencyMode, idle_timeout_ms: u64) -> FunctionConfig {
    FunctionConfig {
        function: fid(name),
        image_digest: "0".repeat(64),
        memory_limit_mb: 128,
        cpu_millis: 1000,
        concurrency,
        idle_timeout_ms,
        exec_deadline_ms: 30_000,
    }
}

/// Model with a single function: fixed latency plus optional in-flight
/// slope, noise, cold extra, and failure rate.
pub fn model(
    name: &str,
    base_ms: f64,
    per_inflight_ms: f64,
    sigma_ms: f64,
    cold_extra_ms: f64,
    failure_rate: f64,
) -> WorkerModel {
    let mut m = WorkerModel::new();
    m.functions.insert(
        name.to_string(),
        FunctionModel {
            beta: [base_ms, per_inflight_ms, 0.0, 0.0],
            sigma_ms,
            cold_extra_ms,
            failure_rate,
            n_samples: 1000,
            failure_rate_warning: false,
        },
    );
    m
}

/// Worker backed by an emulated runtime, with one registered function.
pub fn emulated_worker(
    worker_id: &str,
    stores: &Stores,
    cfg: &FunctionConfig,
    model: WorkerModel,
    seed: u64,
) -> Arc<WorkerNode> {
    stores.configs.put(cfg).unwrap();
    WorkerNode::new(
        WorkerOptions::new(worker_id),
        Arc::new(EmulatedRuntime::new(Arc::new(model), seed)),
        stores.configs.clone(),
        stores.images.clone(),
    )
}

/// Independent least-squares oracle: solve the normal equations
/// X^T X b = X^T y by Gauss-Jordan elimination with partial pivoting.
/// Deliberately a different algebraic route than the fit under test.
#[allow(clippy::needless_range_loop)]
pub fn normal_equations_ols(rows: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let n = rows.len();
    let k = rows[0].len();
    assert!(n >= k);
    let mut ata = vec![vec![0.0f64; k]; k];
    let mut aty = vec![0.0f64; k];
    for (row, &yi) in rows.iter().zip(y) {
        for i in 0..k {
            for j in 0..k {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * yi;
        }
    }
    // augmented [A | b] elimination
    for col in 0..k {
        let pivot = (col..k).max_by(|&a, &b| {
            ata[a][col].abs().partial_cmp(&ata[b][col].abs()).unwrap()
        })?;
        if ata[pivot][col].abs() < 1e-12 {
            return None;
        }
        ata.swap(col, pivot);
        aty.swap(col, pivot);
        let p = ata[col][col];
        for j in 0..k {
            ata[col][j] /= p;
        }
        aty[col] /= p;
        for r in 0..k {
            if r != col {
                let factor = ata[r][col];
                for j in 0..k {
                    ata[r][j] -= factor * ata[col][j];
                }
                aty[r] -= factor * aty[col];
            }
        }
    }
    Some(aty)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
