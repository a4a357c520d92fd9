//! Result aggregation: per-function and overall counts, error
//! histograms, and nearest-rank latency percentiles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::util::nearest_rank;

use super::generate::CallRow;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FunctionStats {
    pub count: u64,
    pub success_count: u64,
    pub cold_start_count: u64,
    /// Error counts keyed by stable code string.
    pub errors: BTreeMap<String, u64>,
    pub p50_ms: u64,
    pub p90_ms: u64,
    pub p95_ms: u64,
    pub p99_ms: u64,
    pub max_ms: u64,
    pub achieved_rate_per_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub overall: FunctionStats,
    pub per_function: BTreeMap<String, FunctionStats>,
}

fn stats_for(rows: &[&CallRow]) -> FunctionStats {
    let mut stats = FunctionStats { count: rows.len() as u64, ..Default::default() };
    if rows.is_empty() {
        return stats;
    }
    let mut latencies: Vec<u64> = Vec::with_capacity(rows.len());
    let mut min_start = u64::MAX;
    let mut max_end = 0u64;
    for row in rows {
        latencies.push(row.latency_ms());
        min_start = min_start.min(row.start_t_ms);
        max_end = max_end.max(row.end_t_ms);
        if row.ok {
            stats.success_count += 1;
        } else {
            let code = row.code.map(|c| c.as_str()).unwrap_or("UNKNOWN");
            *stats.errors.entry(code.to_string()).or_insert(0) += 1;
        }
        if row.cold_start {
            stats.cold_start_count += 1;
        }
    }
    latencies.sort_unstable();
    stats.p50_ms = nearest_rank(&latencies, 0.50).unwrap_or(0);
    stats.p90_ms = nearest_rank(&latencies, 0.90).unwrap_or(0);
    stats.p95_ms = nearest_rank(&latencies, 0.95).unwrap_or(0);
    stats.p99_ms = nearest_rank(&latencies, 0.99).unwrap_or(0);
    stats.max_ms = *latencies.last().unwrap();
    let span_ms = max_end.saturating_sub(min_start);
    stats.achieved_rate_per_s =
        if span_ms == 0 { 0.0 } else { stats.count as f64 * 1000.0 / span_ms as f64 };
    stats
}

/// Aggregate rows into a report. Pure: the same rows always produce the
/// same report.
pub fn build_report(rows: &[CallRow]) -> RunReport {
    let all: Vec<&CallRow> = rows.iter().collect();
    let mut by_function: BTreeMap<String, Vec<&CallRow>> = BTreeMap::new();
    for row in rows {
        by_function.entry(row.function.to_string()).or_default().push(row);
    }
    RunReport {
        overall: stats_for(&all),
        per_function: by_function.into_iter().map(|(f, rows)| (f, stats_for(&rows))).collect(),
    }
}

/// Plain-text table, one line per function plus an overall line.
pub fn render_table(report: &RunReport) -> String {
    let mut out = String::new();
    let header = format!(
        "{:<20} {:>8} {:>8} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9}  {}",
        "function", "count", "ok", "err", "cold", "p50ms", "p90ms", "p95ms", "p99ms", "maxms", "rate/s", "errors"
    );
    out.push_str(&header);
    out.push('\n');
    out.push_str(&"-".repeat(header.len().max(100)));
    out.push('\n');

    let mut line = |name: &str, s: &FunctionStats| {
        let errs: String = s
            .errors
            .iter()
            .map(|(code, n)| format!("{code}:{n}"))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{:<20} {:>8} {:>8} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9.1}  {}\n",
            name,
            s.count,
            s.success_count,
            s.count - s.success_count,
            s.cold_start_count,
            s.p50_ms,
            s.p90_ms,
            s.p95_ms,
            s.p99_ms,
            s.max_ms,
            s.achieved_rate_per_s,
            errs,
        ));
    };
    for (name, stats) in &report.per_function {
        line(name, stats);
    }
    line("(overall)", &report.overall);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::types::{ErrorCode, FunctionId};

    fn row(function: &str, start: u64, end: u64, ok: bool, code: Option<ErrorCode>) -> CallRow {
        CallRow {
            call_id: format!("{start:032x}"),
            function: FunctionId::new(function).unwrap(),
            sched_t_ms: start,
            start_t_ms: start,
            end_t_ms: end,
            ok,
            code,
            cold_start: false,
            queue_wait_ms: 0,
            exec_ms: end - start,
            worker_id: "w".into(),
            payload_bytes: 0,
        }
    }

    #[test]
    fn percentiles_are_nearest_rank() {
        let rows = vec![row("f", 0, 1, true, None), row("f", 0, 2, true, None), row("f", 0, 3, true, None)];
        let report = build_report(&rows);
        assert_eq!(report.overall.p50_ms, 2);
        assert_eq!(report.overall.max_ms, 3);
    }

    #[test]
    fn singleton_percentiles_collapse() {
        let rows = vec![row("f", 0, 10, true, None)];
        let report = build_report(&rows);
        assert_eq!(report.overall.p50_ms, 10);
        assert_eq!(report.overall.p99_ms, 10);
        assert_eq!(report.overall.max_ms, 10);
    }

    #[test]
    fn error_histogram_counts() {
        let mut rows: Vec<CallRow> = (0..93).map(|i| row("f", i, i + 1, true, None)).collect();
        rows.extend((0..7).map(|i| row("f", 100 + i, 100 + i, false, Some(ErrorCode::FunctionError))));
        let report = build_report(&rows);
        assert_eq!(report.overall.count, 100);
        assert_eq!(report.overall.success_count, 93);
        assert_eq!(report.overall.errors.get("FUNCTION_ERROR"), Some(&7));
        assert_eq!(
            report.overall.count,
            report.overall.success_count + report.overall.errors.values().sum::<u64>()
        );
    }

    #[test]
    fn empty_rows_give_zero_counts() {
        let report = build_report(&[]);
        assert_eq!(report.overall.count, 0);
        assert_eq!(report.overall.p50_ms, 0);
        assert!(report.per_function.is_empty());
        render_table(&report);
    }
}
