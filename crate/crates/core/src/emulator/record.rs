//! Trace recording: drive the load generator against a live worker
//! while polling its state, then attribute per-call concurrency and
//! utilization from the nearest state sample.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tracing::warn;

use crate::bench::{generate, CallRow, LoadProfile};
use crate::protocol::transport::NodeHandle;
use crate::protocol::types::WorkerSnapshot;
use crate::util::epoch_ms;

use super::trace::{write_trace, TraceRecord};
use super::EmulatorError;

/// State polling rate while recording.
pub const STATE_POLL_INTERVAL_MS: u64 = 100;

#[derive(Debug)]
pub struct RecordSummary {
    pub calls: u64,
    pub failures: u64,
    pub functions: BTreeSet<String>,
    pub state_samples: u64,
    pub trace_path: PathBuf,
}

/// Per-instance mean in-flight for the row's function, from the nearest
/// state sample at or before the call, plus worker utilization there.
fn attribute(row: &CallRow, samples: &[(u64, WorkerSnapshot)]) -> (u64, f64) {
    if samples.is_empty() {
        return (1, 0.0);
    }
    let idx = match samples.binary_search_by_key(&row.start_t_ms, |(t, _)| *t) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) => i - 1,
    };
    let snap = &samples[idx].1;
    let (total, count) = snap
        .instances_of(&row.function)
        .fold((0u64, 0u64), |(t, c), inst| (t + inst.in_flight, c + 1));
    let inflight = if count == 0 {
        // instance-level attribution is best-effort: before the first
        // instance shows up in a sample, assume the call ran alone
        1
    } else {
        ((total as f64 / count as f64).round() as u64).max(1)
    };
    (inflight, snap.utilization)
}

/// Record one trace: run `profile` against `target` (a worker), polling
/// state at 10 Hz, and write one row per call to `trace_path`.
///
/// An unreachable target aborts before any load is sent. If the trace
/// file cannot be written completely, the partial file is renamed with
/// an `.invalid` suffix.
pub async fn record_trace(
    target: Arc<dyn NodeHandle>,
    profile: &LoadProfile,
    trace_path: &Path,
) -> Result<RecordSummary, EmulatorError> {
    target
        .probe()
        .await
        .map_err(|e| EmulatorError::Record(format!("target unreachable: {e}")))?;

    let samples: Arc<Mutex<Vec<(u64, WorkerSnapshot)>>> = Arc::new(Mutex::new(Vec::new()));
    let poller = {
        let samples = Arc::clone(&samples);
        let target = Arc::clone(&target);
        tokio::spawn(async move {
            loop {
                match target.state().await {
                    Ok(snap) => samples.lock().unwrap().push((epoch_ms(), snap)),
                    Err(e) => warn!("state poll failed: {e}"),
                }
                tokio::time::sleep(Duration::from_millis(STATE_POLL_INTERVAL_MS)).await;
            }
        })
    };

    let rows = generate(target, profile).await;
    poller.abort();
    let rows = rows.map_err(|e| EmulatorError::Record(e.to_string()))?;

    let samples = {
        let mut guard = samples.lock().unwrap();
        std::mem::take(&mut *guard)
    };
    if samples.is_empty() {
        warn!("no state samples collected; in-flight attribution defaults to 1");
    }

    let mut records = Vec::with_capacity(rows.len());
    let mut functions = BTreeSet::new();
    let mut failures = 0u64;
    for row in &rows {
        let (inflight, utilization) = attribute(row, &samples);
        if !row.ok {
            failures += 1;
        }
        functions.insert(row.function.to_string());
        records.push(TraceRecord {
            t_ms: row.start_t_ms,
            function: row.function.clone(),
            payload_bytes: row.payload_bytes,
            inflight_at_admit: inflight,
            queue_wait_ms: row.queue_wait_ms,
            exec_ms: row.exec_ms,
            cold_start: row.cold_start,
            success: row.ok,
            utilization,
        });
    }

    if let Err(e) = write_trace(trace_path, &records) {
        let invalid = trace_path.with_extension("csv.invalid");
        let _ = std::fs::rename(trace_path, &invalid);
        return Err(EmulatorError::Record(format!(
            "trace write failed, partial file moved to {}: {e}",
            invalid.display()
        )));
    }

    Ok(RecordSummary {
        calls: rows.len() as u64,
        failures,
        functions,
        state_samples: samples.len() as u64,
        trace_path: trace_path.to_path_buf(),
    })
}
