//! Replica scaling for unlimited within-instance concurrency: inspect
//! per-instance utilization at a fixed interval and add or remove
//! replicas when it stays out of band.

/// A utilization reading for one instance at one check.
#[derive(Debug, Clone)]
pub struct UtilReading {
    pub instance_id: String,
    pub in_flight: u32,
    /// 0..1 resource fraction (CPU share for process runtimes,
    /// normalized in-flight for emulated ones).
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScaleAction {
    StartReplica,
    StopInstance { instance_id: String },
}

/// Streak state for one function's periodic checks.
///
/// Scale up fires after two consecutive checks with mean utilization
/// above the threshold; scale down after two consecutive checks below
/// half the threshold with an idle instance present and more than one
/// instance alive. Streaks reset after firing.
#[derive(Debug, Default)]
pub struct ScaleTracker {
    high_streak: u32,
    low_streak: u32,
}

impl ScaleTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(&mut self, threshold: f64, readings: &[UtilReading]) -> Vec<ScaleAction> {
        if readings.is_empty() {
            self.high_streak = 0;
            self.low_streak = 0;
            return Vec::new();
        }
        let mean =
            readings.iter().map(|r| r.utilization).sum::<f64>() / readings.len() as f64;
        let mut actions = Vec::new();

        if mean > threshold {
            self.high_streak += 1;
        } else {
            self.high_streak = 0;
        }
        if self.high_streak >= 2 {
            actions.push(ScaleAction::StartReplica);
            self.high_streak = 0;
        }

        let has_idle = readings.iter().any(|r| r.in_flight == 0);
        if mean < threshold / 2.0 && has_idle {
            self.low_streak += 1;
        } else {
            self.low_streak = 0;
        }
        if self.low_streak >= 2 && readings.len() > 1 {
            let victim = readings
                .iter()
                .min_by_key(|r| (r.in_flight, r.instance_id.as_str()))
                .expect("readings non-empty");
            actions.push(ScaleAction::StopInstance { instance_id: victim.instance_id.clone() });
            self.low_streak = 0;
        }
        actions
    }
}
