//! Ordinary least squares fit of warm execution latency on
//! (1, in-flight, payload KiB, utilization), via Householder QR.

use std::collections::BTreeMap;

use crate::protocol::types::FunctionId;

use super::model::{FunctionModel, WorkerModel, FAILURE_RATE_MIN_SAMPLES, FEATURES, MODEL_VERSION};
use super::trace::TraceRecord;
use super::EmulatorError;

/// Minimum successful warm records per function for a latency fit.
pub const MIN_WARM_SAMPLES: usize = 10;

enum QrOutcome {
    Solved { beta: Vec<f64>, sigma: f64 },
    /// Index (into the active column list) of the first column found
    /// linearly dependent on the columns left of it.
    Dependent(usize),
}

/// QR least squares on the active feature columns. `rows` holds full
/// 4-wide feature vectors; `active` selects and orders the columns.
fn qr_least_squares(rows: &[[f64; FEATURES]], y: &[f64], active: &[usize]) -> QrOutcome {
    let n = rows.len();
    let k = active.len();
    debug_assert!(n >= k && k >= 1);

    // column-major working copy
    let mut a: Vec<Vec<f64>> = active
        .iter()
        .map(|&c| rows.iter().map(|r| r[c]).collect::<Vec<f64>>())
        .collect();
    let mut q_t_y: Vec<f64> = y.to_vec();

    let scale = a
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(1.0_f64, f64::max);
    let tol = 1e-10 * scale;

    let mut r_diag = vec![0.0; k];
    for j in 0..k {
        let sub_norm = a[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if sub_norm <= tol {
            return QrOutcome::Dependent(j);
        }
        let alpha = if a[j][j] >= 0.0 { -sub_norm } else { sub_norm };
        let mut v = vec![0.0; n];
        v[j] = a[j][j] - alpha;
        v[(j + 1)..n].copy_from_slice(&a[j][(j + 1)..n]);
        let vtv: f64 = v[j..].iter().map(|x| x * x).sum();
        if vtv > 0.0 {
            for col in a.iter_mut().skip(j) {
                let s: f64 = 2.0 * v[j..].iter().zip(&col[j..]).map(|(a, b)| a * b).sum::<f64>() / vtv;
                for i in j..n {
                    col[i] -= s * v[i];
                }
            }
            let s: f64 =
                2.0 * v[j..].iter().zip(&q_t_y[j..]).map(|(a, b)| a * b).sum::<f64>() / vtv;
            for i in j..n {
                q_t_y[i] -= s * v[i];
            }
        }
        a[j][j] = alpha;
        r_diag[j] = alpha;
    }

    // back-substitution on R beta = (Q^T y)[0..k]
    let mut beta = vec![0.0; k];
    for j in (0..k).rev() {
        let mut acc = q_t_y[j];
        for c in (j + 1)..k {
            acc -= a[c][j] * beta[c];
        }
        beta[j] = acc / r_diag[j];
    }

    let ssr: f64 = q_t_y[k..].iter().map(|v| v * v).sum();
    let sigma = if n > k { (ssr / (n - k) as f64).sqrt() } else { 0.0 };
    QrOutcome::Solved { beta, sigma }
}

/// Fit the active-column set, dropping dependent columns until the
/// system is full rank. Dropped columns get a zero coefficient.
fn fit_latency(rows: &[[f64; FEATURES]], y: &[f64]) -> ([f64; FEATURES], f64) {
    let mut active: Vec<usize> = (0..FEATURES).collect();
    loop {
        match qr_least_squares(rows, y, &active) {
            QrOutcome::Solved { beta, sigma } => {
                let mut full = [0.0; FEATURES];
                for (slot, b) in active.iter().zip(beta) {
                    full[*slot] = b;
                }
                return (full, sigma);
            }
            QrOutcome::Dependent(j) => {
                // The intercept column (all ones) can never be flagged
                // while n >= 1, so removal always leaves a column.
                active.remove(j);
            }
        }
    }
}

fn features(rec: &TraceRecord) -> [f64; FEATURES] {
    [1.0, rec.inflight_at_admit as f64, rec.payload_bytes as f64 / 1024.0, rec.utilization]
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Fit a [`WorkerModel`] to a recorded trace.
///
/// Per function: OLS of warm successful `exec_ms` on the feature
/// vector; `cold_extra_ms` as the mean cold-over-warm latency shift,
/// clamped at zero; failure rate as the plain failure fraction once
/// enough samples exist. Functions whose every record failed get a
/// latency-free model (their rows are excluded from the regression).
pub fn fit_model(trace: &[TraceRecord]) -> Result<WorkerModel, EmulatorError> {
    let mut by_function: BTreeMap<&str, Vec<&TraceRecord>> = BTreeMap::new();
    for rec in trace {
        by_function.entry(rec.function.as_str()).or_default().push(rec);
    }

    let mut model = WorkerModel::new();
    model.model_version = MODEL_VERSION.to_string();

    for (name, records) in by_function {
        let total = records.len() as u64;
        let failures = records.iter().filter(|r| !r.success).count() as u64;
        let warm: Vec<&&TraceRecord> =
            records.iter().filter(|r| r.success && !r.cold_start).collect();
        let cold: Vec<&&TraceRecord> =
            records.iter().filter(|r| r.success && r.cold_start).collect();

        let (beta, sigma) = if warm.is_empty() && cold.is_empty() {
            // every record failed: nothing to regress, keep the failure
            // behavior only
            ([0.0; FEATURES], 0.0)
        } else if warm.len() < MIN_WARM_SAMPLES {
            return Err(EmulatorError::InsufficientData {
                function: name.to_string(),
                have: warm.len(),
                need: MIN_WARM_SAMPLES,
            });
        } else {
            let rows: Vec<[f64; FEATURES]> = warm.iter().map(|r| features(r)).collect();
            let y: Vec<f64> = warm.iter().map(|r| r.exec_ms as f64).collect();
            fit_latency(&rows, &y)
        };

        let warm_mean = mean(warm.iter().map(|r| r.exec_ms as f64));
        let cold_mean = mean(cold.iter().map(|r| r.exec_ms as f64));
        let cold_extra_ms = match (cold_mean, warm_mean) {
            (Some(c), Some(w)) => (c - w).max(0.0),
            _ => 0.0,
        };

        let (failure_rate, failure_rate_warning) = if total >= FAILURE_RATE_MIN_SAMPLES {
            (failures as f64 / total as f64, false)
        } else {
            (0.0, true)
        };

        model.functions.insert(
            name.to_string(),
            FunctionModel {
                beta,
                sigma_ms: sigma,
                cold_extra_ms,
                failure_rate,
                n_samples: total,
                failure_rate_warning,
            },
        );
    }
    Ok(model)
}

/// Convenience constructor for synthetic traces in tests and examples.
#[allow(clippy::too_many_arguments)]
pub fn synth_record(
    function: &FunctionId,
    t_ms: u64,
    inflight: u64,
    payload_bytes: u64,
    utilization: f64,
    exec_ms: u64,
    cold: bool,
    success: bool,
) -> TraceRecord {
    TraceRecord {
        t_ms,
        function: function.clone(),
        payload_bytes,
        inflight_at_admit: inflight,
        queue_wait_ms: 0,
        exec_ms,
        cold_start: cold,
        success,
        utilization,
    }
}
