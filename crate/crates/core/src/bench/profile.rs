//! Load profiles: phased closed-loop or open-loop call patterns with
//! deterministic, seeded arrival schedules.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::types::FunctionId;

use super::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalKind {
    Poisson,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Pattern {
    /// `workers` independent loops, each issuing `calls_per_worker`
    /// sequential calls.
    ClosedLoop { workers: u32, calls_per_worker: u32 },
    /// Calls fired at scheduled instants regardless of outstanding
    /// responses.
    OpenLoop { rate_per_s: f64, duration_ms: u64, arrivals: ArrivalKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub function: FunctionId,
    pub pattern: Pattern,
    pub payload_bytes: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub phases: Vec<Phase>,
}

impl LoadProfile {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.phases.is_empty() {
            return Err(BenchError::Profile("profile needs at least one phase".into()));
        }
        for (i, phase) in self.phases.iter().enumerate() {
            match &phase.pattern {
                Pattern::ClosedLoop { workers, calls_per_worker } => {
                    if *workers == 0 || *calls_per_worker == 0 {
                        return Err(BenchError::Profile(format!(
                            "phase {i}: workers and calls_per_worker must be positive"
                        )));
                    }
                }
                Pattern::OpenLoop { rate_per_s, duration_ms, .. } => {
                    if *rate_per_s <= 0.0 || !rate_per_s.is_finite() {
                        return Err(BenchError::Profile(format!(
                            "phase {i}: rate_per_s must be positive"
                        )));
                    }
                    if *duration_ms == 0 {
                        return Err(BenchError::Profile(format!(
                            "phase {i}: duration_ms must be positive"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let bytes = std::fs::read(path)?;
        let profile: LoadProfile = serde_json::from_slice(&bytes)
            .map_err(|e| BenchError::Profile(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    /// Exact number of calls the profile will schedule (Poisson phases
    /// materialize their seeded schedule to count it).
    pub fn total_calls(&self) -> u64 {
        self.phases
            .iter()
            .map(|p| match &p.pattern {
                Pattern::ClosedLoop { workers, calls_per_worker } => {
                    u64::from(*workers) * u64::from(*calls_per_worker)
                }
                Pattern::OpenLoop { rate_per_s, duration_ms, arrivals: ArrivalKind::Uniform } => {
                    open_loop_count(*rate_per_s, *duration_ms)
                }
                Pattern::OpenLoop { rate_per_s, duration_ms, arrivals: ArrivalKind::Poisson } => {
                    open_loop_schedule(*rate_per_s, *duration_ms, ArrivalKind::Poisson, p.seed)
                        .len() as u64
                }
            })
            .sum()
    }
}

pub(crate) fn open_loop_count(rate_per_s: f64, duration_ms: u64) -> u64 {
    (rate_per_s * duration_ms as f64 / 1000.0).round() as u64
}

/// Arrival offsets (ms from phase start) for an open-loop pattern.
/// Uniform schedules are exact; Poisson schedules are seeded draws, so
/// the same seed always yields the same schedule.
pub fn open_loop_schedule(
    rate_per_s: f64,
    duration_ms: u64,
    arrivals: ArrivalKind,
    seed: u64,
) -> Vec<f64> {
    match arrivals {
        ArrivalKind::Uniform => {
            let n = open_loop_count(rate_per_s, duration_ms);
            let spacing = 1000.0 / rate_per_s;
            (0..n).map(|i| i as f64 * spacing).collect()
        }
        ArrivalKind::Poisson => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mean_gap_ms = 1000.0 / rate_per_s;
            let mut t = 0.0;
            let mut out = Vec::new();
            loop {
                let u: f64 = rng.gen::<f64>();
                t += -((1.0 - u).ln()) * mean_gap_ms;
                if t >= duration_ms as f64 {
                    return out;
                }
                out.push(t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_schedule_is_exact() {
        let sched = open_loop_schedule(100.0, 1000, ArrivalKind::Uniform, 0);
        assert_eq!(sched.len(), 100);
        assert_eq!(sched[0], 0.0);
        assert_eq!(sched[1], 10.0);
        assert_eq!(sched[99], 990.0);
    }

    #[test]
    fn poisson_schedule_is_seeded() {
        let a = open_loop_schedule(50.0, 2000, ArrivalKind::Poisson, 42);
        let b = open_loop_schedule(50.0, 2000, ArrivalKind::Poisson, 42);
        let c = open_loop_schedule(50.0, 2000, ArrivalKind::Poisson, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&t| t < 2000.0));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn validation_catches_bad_phases() {
        let profile = LoadProfile { phases: vec![] };
        assert!(profile.validate().is_err());

        let profile = LoadProfile {
            phases: vec![Phase {
                function: FunctionId::new("echo").unwrap(),
                pattern: Pattern::ClosedLoop { workers: 0, calls_per_worker: 5 },
                payload_bytes: 0,
                seed: 1,
            }],
        };
        assert!(profile.validate().is_err());
    }

    #[test]
    fn profile_json_shape() {
        let json = r#"{
            "phases": [
                {"function": "echo",
                 "pattern": {"type": "closed_loop", "workers": 2, "calls_per_worker": 10},
                 "payload_bytes": 64, "seed": 7},
                {"function": "echo",
                 "pattern": {"type": "open_loop", "rate_per_s": 50.0, "duration_ms": 1000, "arrivals": "poisson"},
                 "payload_bytes": 0, "seed": 8}
            ]
        }"#;
        let profile: LoadProfile = serde_json::from_str(json).unwrap();
        assert!(profile.validate().is_ok());
        assert_eq!(profile.phases.len(), 2);
        assert_eq!(profile.total_calls(), 20 + 50);
    }
}
