//! Admission policy: decide where an incoming call goes given the
//! function's concurrency mode and the current instance set.

use crate::protocol::types::ConcurrencyMode;

/// Load view of one instance, as seen by the admission decision.
#[derive(Debug, Clone)]
pub struct InstanceLoad<'a> {
    pub instance_id: &'a str,
    pub in_flight: u32,
    pub stopping: bool,
}

/// Caps applied by a worker across all admission decisions.
#[derive(Debug, Clone, Copy)]
pub struct AdmissionLimits {
    pub max_instances_per_function: u32,
    pub queue_cap: u32,
}

impl Default for AdmissionLimits {
    fn default() -> Self {
        Self { max_instances_per_function: 256, queue_cap: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdmissionDecision {
    /// Run on this existing instance.
    Admit { instance_id: String },
    /// Create a new instance for this call.
    StartNew,
    /// Wait for capacity.
    Queue,
    /// Queue full: fail with OVERLOADED.
    Reject,
}

/// Decide admission for one call.
///
/// `instances` must all belong to the call's function and be ordered by
/// instance id (ties break toward the lowest id).
///
/// Single / HardLimit(c): admit onto the fullest instance still below
/// the limit, packing calls together so other instances stay idle for
/// the reaper; otherwise start a new instance, queue, or reject in that
/// order. Unlimited: admit onto the least loaded instance; replica
/// scaling is the scale checker's job, not admission's.
pub fn admit(
    mode: &ConcurrencyMode,
    instances: &[InstanceLoad<'_>],
    queue_len: u32,
    limits: &AdmissionLimits,
) -> AdmissionDecision {
    match mode.admission_limit() {
        Some(limit) => {
            let mut best: Option<&InstanceLoad<'_>> = None;
            for inst in instances.iter().filter(|i| !i.stopping && i.in_flight < limit) {
                // strict comparison keeps the lowest id among equals
                if best.is_none_or(|b| inst.in_flight > b.in_flight) {
                    best = Some(inst);
                }
            }
            if let Some(inst) = best {
                return AdmissionDecision::Admit { instance_id: inst.instance_id.to_string() };
            }
            let live = instances.iter().filter(|i| !i.stopping).count() as u32;
            if live < limits.max_instances_per_function {
                AdmissionDecision::StartNew
            } else if queue_len < limits.queue_cap {
                AdmissionDecision::Queue
            } else {
                AdmissionDecision::Reject
            }
        }
        None => {
            let cand = instances
                .iter()
                .filter(|i| !i.stopping)
                .min_by_key(|i| (i.in_flight, i.instance_id));
            match cand {
                Some(inst) => {
                    AdmissionDecision::Admit { instance_id: inst.instance_id.to_string() }
                }
                None => AdmissionDecision::StartNew,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loads<'a>(v: &'a [(&'a str, u32)]) -> Vec<InstanceLoad<'a>> {
        v.iter()
            .map(|(id, n)| InstanceLoad { instance_id: id, in_flight: *n, stopping: false })
            .collect()
    }

    #[test]
    fn single_mode_busy_instance_forces_new() {
        let inst = loads(&[("i1", 1)]);
        let d = admit(&ConcurrencyMode::Single, &inst, 0, &AdmissionLimits::default());
        assert_eq!(d, AdmissionDecision::StartNew);
    }

    #[test]
    fn hard_limit_packs_busiest_eligible() {
        let inst = loads(&[("i1", 1), ("i2", 0)]);
        let d = admit(
            &ConcurrencyMode::HardLimit { limit: 2 },
            &inst,
            0,
            &AdmissionLimits::default(),
        );
        assert_eq!(d, AdmissionDecision::Admit { instance_id: "i1".into() });
    }

    #[test]
    fn hard_limit_ties_break_to_lowest_id() {
        let inst = loads(&[("i1", 1), ("i2", 1), ("i3", 0)]);
        let d = admit(
            &ConcurrencyMode::HardLimit { limit: 4 },
            &inst,
            0,
            &AdmissionLimits::default(),
        );
        assert_eq!(d, AdmissionDecision::Admit { instance_id: "i1".into() });
    }

    #[test]
    fn unlimited_admits_even_when_loaded() {
        let inst = loads(&[("i1", 1000)]);
        let d = admit(
            &ConcurrencyMode::Unlimited { util_threshold: 0.8, check_interval_ms: 100 },
            &inst,
            0,
            &AdmissionLimits::default(),
        );
        assert_eq!(d, AdmissionDecision::Admit { instance_id: "i1".into() });
    }

    #[test]
    fn unlimited_prefers_least_loaded() {
        let inst = loads(&[("i1", 5), ("i2", 2), ("i3", 2)]);
        let d = admit(
            &ConcurrencyMode::Unlimited { util_threshold: 0.8, check_interval_ms: 100 },
            &inst,
            0,
            &AdmissionLimits::default(),
        );
        assert_eq!(d, AdmissionDecision::Admit { instance_id: "i2".into() });
    }

    #[test]
    fn every_branch_exhausted_rejects() {
        let inst = loads(&[("i1", 1)]);
        let limits = AdmissionLimits { max_instances_per_function: 1, queue_cap: 0 };
        let d = admit(&ConcurrencyMode::Single, &inst, 0, &limits);
        assert_eq!(d, AdmissionDecision::Reject);
    }

    #[test]
    fn queue_before_reject() {
        let inst = loads(&[("i1", 1)]);
        let limits = AdmissionLimits { max_instances_per_function: 1, queue_cap: 2 };
        assert_eq!(admit(&ConcurrencyMode::Single, &inst, 0, &limits), AdmissionDecision::Queue);
        assert_eq!(admit(&ConcurrencyMode::Single, &inst, 1, &limits), AdmissionDecision::Queue);
        assert_eq!(admit(&ConcurrencyMode::Single, &inst, 2, &limits), AdmissionDecision::Reject);
    }

    #[test]
    fn stopping_instances_never_admit() {
        let inst = vec![InstanceLoad { instance_id: "i1", in_flight: 0, stopping: true }];
        let d = admit(&ConcurrencyMode::Single, &inst, 0, &AdmissionLimits::default());
        assert_eq!(d, AdmissionDecision::StartNew);
    }

    #[test]
    fn hard_limit_one_matches_single() {
        let inst = loads(&[("i1", 0), ("i2", 1)]);
        let limits = AdmissionLimits::default();
        let single = admit(&ConcurrencyMode::Single, &inst, 0, &limits);
        let hard_one = admit(&ConcurrencyMode::HardLimit { limit: 1 }, &inst, 0, &limits);
        assert_eq!(single, hard_one);
        assert_eq!(single, AdmissionDecision::Admit { instance_id: "i1".into() });
    }
}
