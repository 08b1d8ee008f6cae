use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Mode, OrchestratorError, Phase};
use crate::fleet::{ClusterId, EnvId, ServiceId};
use crate::simkernel::SimTime;
use crate::traffic::RequestOutcome;

/// Root-request tallies. Failover-tagged outcomes are always failures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub requests: u64,
    pub failures: u64,
    pub tagged: u64,
}

impl Counts {
    pub fn add(&mut self, o: &RequestOutcome) {
        self.requests += 1;
        if !o.success {
            self.failures += 1;
        }
        if o.failover_tagged {
            self.tagged += 1;
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        self.requests += other.requests;
        self.failures += other.failures;
        self.tagged += other.tagged;
    }

    /// Success fraction; `None` when the denominator is empty.
    pub fn availability(&self, exclude_tagged: bool) -> Option<f64> {
        let (den, fail) = if exclude_tagged {
            (self.requests - self.tagged, self.failures - self.tagged)
        } else {
            (self.requests, self.failures)
        };
        (den > 0).then(|| (den - fail) as f64 / den as f64)
    }
}

/// Availability counters for one time bucket.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub start: SimTime,
    /// Always-on plus active-migrate roots.
    pub critical: Counts,
    /// Indexed by failure class order.
    pub by_class: [Counts; 4],
    pub by_city: Vec<Counts>,
    pub by_service: Vec<Counts>,
}

/// Cores of each class by where they run; one point per change.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPoint {
    pub t: SimTime,
    pub ao: u64,
    pub am_total: u64,
    pub am_steady: u64,
    pub am_bursted: u64,
    /// Restore-later environments terminated by the current failover, in
    /// cores at restored size.
    pub rl_terminated_total: u64,
    pub rl_not_bursted: u64,
    pub rl_bursted: u64,
    pub rl_steady: u64,
    pub t_serving: u64,
}

impl ClassPoint {
    fn same_values(&self, o: &ClassPoint) -> bool {
        ClassPoint { t: o.t, ..*self } == *o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtoVerdict {
    pub env: EnvId,
    pub service: ServiceId,
    pub terminated_at: SimTime,
    pub restored_at: Option<SimTime>,
    pub downtime: Option<SimTime>,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub t: SimTime,
    pub invariant: String,
    pub env: Option<EnvId>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstSample {
    pub t: SimTime,
    pub cluster: ClusterId,
    pub cores_online: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionRecord {
    pub t: SimTime,
    pub cluster: ClusterId,
    pub jobs: u32,
    pub cores: u64,
    /// Summed restart cost of the evicted jobs.
    pub restart_cost: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilSample {
    pub t: SimTime,
    /// Consumed over physical cores of steady-state hosts, per region.
    pub regions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedError {
    pub t: SimTime,
    pub error: OrchestratorError,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QosStats {
    pub evictions: u64,
    pub throttles: u64,
    pub relocations: u64,
    pub alarms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub phase: Option<Phase>,
    pub cloud_hosts: usize,
    pub cloud_provisioned: u64,
    pub burst_clusters: usize,
    pub locked_envs: usize,
}

/// Everything a run observed, in simulation order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub horizon: SimTime,
    pub bucket: SimTime,
    pub phases: Vec<(SimTime, Phase)>,
    pub modes: Vec<(SimTime, Mode)>,
    pub errors: Vec<TimedError>,
    pub buckets: Vec<Bucket>,
    pub class_series: Vec<ClassPoint>,
    pub utilization: Vec<UtilSample>,
    pub burst_series: Vec<BurstSample>,
    pub evictions: Vec<EvictionRecord>,
    pub rto: Vec<RtoVerdict>,
    pub violations: Vec<Violation>,
    pub qos: QosStats,
    /// Services whose environment the orchestrator terminated or disabled.
    pub stopped_services: Vec<ServiceId>,
    pub city_moves: Vec<(SimTime, Vec<u32>)>,
    pub batch_resumed: BTreeMap<ClusterId, SimTime>,
    pub migration_slot_peak: usize,
    pub requests: u64,
    pub final_state: FinalState,
}

impl RunRecord {
    pub fn bucket_index(&self, t: SimTime) -> usize {
        (t.0 / self.bucket.0.max(1)) as usize
    }

    pub(crate) fn bucket_mut(&mut self, t: SimTime, cities: usize, services: usize) -> &mut Bucket {
        let i = self.bucket_index(t);
        while self.buckets.len() <= i {
            let start = SimTime(self.bucket.0 * self.buckets.len() as u64);
            self.buckets.push(Bucket {
                start,
                by_city: vec![Counts::default(); cities],
                by_service: vec![Counts::default(); services],
                ..Bucket::default()
            });
        }
        &mut self.buckets[i]
    }

    pub(crate) fn push_class_point(&mut self, p: ClassPoint) {
        match self.class_series.last_mut() {
            Some(last) if last.same_values(&p) => {}
            Some(last) if last.t == p.t => *last = p,
            _ => self.class_series.push(p),
        }
    }

    /// When `phase` was last entered, if ever.
    pub fn entered(&self, phase: Phase) -> Option<SimTime> {
        self.phases.iter().rev().find(|(_, p)| *p == phase).map(|(t, _)| *t)
    }

    /// Interval from entering FailedOver until failback starts (or the
    /// horizon).
    pub fn failed_over_interval(&self) -> Option<(SimTime, SimTime)> {
        let start = self.entered(Phase::FailedOver)?;
        let end = self
            .phases
            .iter()
            .find(|(t, p)| *t >= start && *p == Phase::FailingBack)
            .map_or(self.horizon, |(t, _)| *t);
        Some((start, end))
    }

    pub fn final_phase(&self) -> Phase {
        self.phases.last().map_or(Phase::Steady, |(_, p)| *p)
    }

    /// Counters summed over buckets overlapping `[from, to)`.
    pub fn window<F>(&self, from: SimTime, to: SimTime, pick: F) -> Counts
    where
        F: Fn(&Bucket) -> Counts,
    {
        let mut c = Counts::default();
        for b in &self.buckets {
            if b.start >= from && b.start < to {
                c.merge(&pick(b));
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::FailureCause;

    fn outcome(success: bool, tagged: bool) -> RequestOutcome {
        RequestOutcome {
            root: ServiceId(0),
            success,
            cause: if success { FailureCause::None } else { FailureCause::Capacity },
            failover_tagged: tagged,
            culprit: None,
        }
    }

    #[test]
    fn counts_availability() {
        let mut c = Counts::default();
        for i in 0..10_000 {
            c.add(&outcome(i >= 3, false));
        }
        assert_eq!(c.availability(false), Some(0.9997));
        let mut t = Counts::default();
        t.add(&outcome(false, true));
        assert_eq!(t.availability(true), None);
        assert_eq!(t.availability(false), Some(0.0));
    }

    #[test]
    fn class_points_collapse_repeats() {
        let mut r = RunRecord::default();
        r.push_class_point(ClassPoint { t: SimTime(1), ao: 5, ..ClassPoint::default() });
        r.push_class_point(ClassPoint { t: SimTime(2), ao: 5, ..ClassPoint::default() });
        r.push_class_point(ClassPoint { t: SimTime(3), ao: 6, ..ClassPoint::default() });
        r.push_class_point(ClassPoint { t: SimTime(3), ao: 7, ..ClassPoint::default() });
        assert_eq!(r.class_series.len(), 2);
        assert_eq!(r.class_series[1].ao, 7);
    }
}
