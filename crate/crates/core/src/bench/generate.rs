//! The load generator: executes a profile against any call target and
//! records one result row per call, never aborting on per-call errors.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::sync::mpsc;

use crate::protocol::transport::{fold_call_result, NodeHandle};
use crate::protocol::types::{CallRequest, ErrorCode, FunctionId, new_call_id};
use crate::util::{derive_seed, epoch_ms};

use super::profile::{open_loop_schedule, LoadProfile, Pattern};
use super::{BenchError, DEFAULT_CALL_DEADLINE_MS};

/// Exact header of a results file.
pub const RESULTS_HEADER: &str =
    "call_id,function,sched_t_ms,start_t_ms,end_t_ms,outcome,code,cold_start,queue_wait_ms,exec_ms,worker_id";

/// One generated call and its observed result.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRow {
    pub call_id: String,
    pub function: FunctionId,
    pub sched_t_ms: u64,
    pub start_t_ms: u64,
    pub end_t_ms: u64,
    pub ok: bool,
    pub code: Option<ErrorCode>,
    pub cold_start: bool,
    pub queue_wait_ms: u64,
    pub exec_ms: u64,
    pub worker_id: String,
    /// Request payload size; kept for trace building, not part of the
    /// results CSV.
    pub payload_bytes: u64,
}

impl CallRow {
    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.call_id,
            self.function,
            self.sched_t_ms,
            self.start_t_ms,
            self.end_t_ms,
            if self.ok { "ok" } else { "err" },
            self.code.map(|c| c.as_str()).unwrap_or(""),
            self.cold_start,
            self.queue_wait_ms,
            self.exec_ms,
            self.worker_id,
        )
    }

    fn from_csv_line(line: &str, lineno: usize) -> Result<Self, BenchError> {
        let bad =
            |what: &str| BenchError::Results(format!("line {lineno}: bad {what} in {line:?}"));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(BenchError::Results(format!(
                "line {lineno}: expected 11 fields, got {}",
                fields.len()
            )));
        }
        let code = if fields[6].is_empty() {
            None
        } else {
            Some(fields[6].parse().map_err(|_| bad("code"))?)
        };
        Ok(CallRow {
            call_id: fields[0].to_string(),
            function: fields[1].parse().map_err(|_| bad("function"))?,
            sched_t_ms: fields[2].parse().map_err(|_| bad("sched_t_ms"))?,
            start_t_ms: fields[3].parse().map_err(|_| bad("start_t_ms"))?,
            end_t_ms: fields[4].parse().map_err(|_| bad("end_t_ms"))?,
            ok: match fields[5] {
                "ok" => true,
                "err" => false,
                _ => return Err(bad("outcome")),
            },
            code,
            cold_start: fields[7].parse().map_err(|_| bad("cold_start"))?,
            queue_wait_ms: fields[8].parse().map_err(|_| bad("queue_wait_ms"))?,
            exec_ms: fields[9].parse().map_err(|_| bad("exec_ms"))?,
            worker_id: fields[10].to_string(),
            payload_bytes: 0,
        })
    }

    /// Client-observed latency.
    pub fn latency_ms(&self) -> u64 {
        self.end_t_ms.saturating_sub(self.start_t_ms)
    }
}

pub fn write_results(path: impl AsRef<Path>, rows: &[CallRow]) -> Result<(), BenchError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{RESULTS_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.to_csv_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<CallRow>, BenchError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header =
        lines.next().ok_or_else(|| BenchError::Results("empty results file".into()))??;
    if header.trim_end() != RESULTS_HEADER {
        return Err(BenchError::Results(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(CallRow::from_csv_line(line.trim_end(), idx + 2)?);
    }
    Ok(rows)
}

fn seeded_payload(seed: u64, len: u64) -> Arc<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xb0d7));
    let mut payload = vec![0u8; len as usize];
    rng.fill(payload.as_mut_slice());
    Arc::new(payload)
}

async fn one_call(
    target: &Arc<dyn NodeHandle>,
    function: &FunctionId,
    payload: &Arc<Vec<u8>>,
    call_id: String,
    sched_t_ms: u64,
) -> CallRow {
    let req = CallRequest {
        call_id: call_id.clone(),
        function: function.clone(),
        payload: payload.as_ref().clone(),
        deadline_ms: DEFAULT_CALL_DEADLINE_MS,
    };
    let start_t_ms = epoch_ms();
    let start = Instant::now();
    let resp = fold_call_result(&call_id, target.call(req).await);
    let end_t_ms = start_t_ms + start.elapsed().as_millis() as u64;
    CallRow {
        call_id,
        function: function.clone(),
        sched_t_ms,
        start_t_ms,
        end_t_ms,
        ok: resp.outcome.is_ok(),
        code: resp.outcome.code(),
        cold_start: resp.cold_start,
        queue_wait_ms: resp.queue_wait_ms,
        exec_ms: resp.exec_ms,
        worker_id: resp.worker_id,
        payload_bytes: payload.len() as u64,
    }
}

/// Run every phase of `profile` against `target`, in order. Returns one
/// row per scheduled call; per-call failures become rows, never errors.
/// Errors only when the target is unreachable before the run starts.
pub async fn generate(
    target: Arc<dyn NodeHandle>,
    profile: &LoadProfile,
) -> Result<Vec<CallRow>, BenchError> {
    profile.validate()?;
    target.probe().await.map_err(|e| match e {
        crate::protocol::transport::TransportError::Unreachable(m) => {
            BenchError::TargetUnreachable(m)
        }
        other => BenchError::TargetUnreachable(other.to_string()),
    })?;

    let mut all_rows: Vec<CallRow> = Vec::with_capacity(profile.total_calls() as usize);
    for phase in &profile.phases {
        let payload = seeded_payload(phase.seed, phase.payload_bytes);
        let (tx, mut rx) = mpsc::unbounded_channel::<CallRow>();

        match &phase.pattern {
            Pattern::ClosedLoop { workers, calls_per_worker } => {
                for w in 0..*workers {
                    let target = Arc::clone(&target);
                    let function = phase.function.clone();
                    let payload = Arc::clone(&payload);
                    let tx = tx.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(phase.seed, u64::from(w)));
                    let calls = *calls_per_worker;
                    tokio::spawn(async move {
                        for _ in 0..calls {
                            let call_id = new_call_id(&mut rng);
                            let sched = epoch_ms();
                            let row = one_call(&target, &function, &payload, call_id, sched).await;
                            if tx.send(row).is_err() {
                                return;
                            }
                        }
                    });
                }
            }
            Pattern::OpenLoop { rate_per_s, duration_ms, arrivals } => {
                let offsets = open_loop_schedule(*rate_per_s, *duration_ms, *arrivals, phase.seed);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(phase.seed, 0xca11));
                let phase_start = tokio::time::Instant::now();
                let phase_start_ms = epoch_ms();
                for offset_ms in offsets {
                    let call_id = new_call_id(&mut rng);
                    let target = Arc::clone(&target);
                    let function = phase.function.clone();
                    let payload = Arc::clone(&payload);
                    let tx = tx.clone();
                    let at = phase_start + std::time::Duration::from_secs_f64(offset_ms / 1000.0);
                    let sched = phase_start_ms + offset_ms as u64;
                    tokio::spawn(async move {
                        tokio::time::sleep_until(at).await;
                        let row = one_call(&target, &function, &payload, call_id, sched).await;
                        let _ = tx.send(row);
                    });
                }
            }
        }
        drop(tx);

        let mut phase_rows = Vec::new();
        while let Some(row) = rx.recv().await {
            phase_rows.push(row);
        }
        phase_rows.sort_by(|a, b| {
            (a.sched_t_ms, a.start_t_ms, &a.call_id).cmp(&(b.sched_t_ms, b.start_t_ms, &b.call_id))
        });
        all_rows.extend(phase_rows);
    }
    Ok(all_rows)
}
