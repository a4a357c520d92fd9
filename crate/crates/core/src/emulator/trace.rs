//! Trace CSV: one row per observed invocation on a worker.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::protocol::types::FunctionId;

use super::EmulatorError;

/// Exact header of a trace file.
pub const TRACE_HEADER: &str =
    "t_ms,function,payload_bytes,inflight_at_admit,queue_wait_ms,exec_ms,cold_start,success,utilization";

/// One observed invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// Epoch ms at admission.
    pub t_ms: u64,
    pub function: FunctionId,
    pub payload_bytes: u64,
    /// Instance-level in-flight at admission.
    pub inflight_at_admit: u64,
    pub queue_wait_ms: u64,
    /// For failures this records time until the failure.
    pub exec_ms: u64,
    pub cold_start: bool,
    pub success: bool,
    /// Worker-level utilization at admission, 0..1.
    pub utilization: f64,
}

impl TraceRecord {
    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.4}",
            self.t_ms,
            self.function,
            self.payload_bytes,
            self.inflight_at_admit,
            self.queue_wait_ms,
            self.exec_ms,
            self.cold_start,
            self.success,
            self.utilization
        )
    }

    fn from_csv_line(line: &str, lineno: usize) -> Result<Self, EmulatorError> {
        let bad = |what: &str| {
            EmulatorError::Trace(format!("line {lineno}: bad {what} in {line:?}"))
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(EmulatorError::Trace(format!(
                "line {lineno}: expected 9 fields, got {}",
                fields.len()
            )));
        }
        Ok(TraceRecord {
            t_ms: fields[0].parse().map_err(|_| bad("t_ms"))?,
            function: fields[1].parse().map_err(|_| bad("function"))?,
            payload_bytes: fields[2].parse().map_err(|_| bad("payload_bytes"))?,
            inflight_at_admit: fields[3].parse().map_err(|_| bad("inflight_at_admit"))?,
            queue_wait_ms: fields[4].parse().map_err(|_| bad("queue_wait_ms"))?,
            exec_ms: fields[5].parse().map_err(|_| bad("exec_ms"))?,
            cold_start: fields[6].parse().map_err(|_| bad("cold_start"))?,
            success: fields[7].parse().map_err(|_| bad("success"))?,
            utilization: fields[8].parse().map_err(|_| bad("utilization"))?,
        })
    }
}

pub fn write_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<(), EmulatorError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{TRACE_HEADER}")?;
    for rec in records {
        writeln!(w, "{}", rec.to_csv_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, EmulatorError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| EmulatorError::Trace("empty trace file".into()))??;
    if header.trim_end() != TRACE_HEADER {
        return Err(EmulatorError::Trace(format!("unexpected header {header:?}")));
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(TraceRecord::from_csv_line(line.trim_end(), idx + 2)?);
    }
    Ok(records)
}
