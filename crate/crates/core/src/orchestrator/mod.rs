//! Failover and failback orchestration: the phase machine, migration
//! bookkeeping, eligibility reconciliation, the event-driven simulation
//! and dependency drills.

mod drills;
mod record;
mod sim;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::burst::{CloudProvider, SpawnerConfig};
use crate::fleet::{EnvId, FailureClass, Fleet, ServiceId};
use crate::placement::QosConfig;
use crate::simkernel::SimTime;
use crate::traffic::Mode;

pub use drills::{blackhole_availability, run_blackhole_drill, BlackholeReport, DrillKind, DrillSpec, DrillStep};
pub use record::{
    Bucket, BurstSample, ClassPoint, Counts, EvictionRecord, FinalState, QosStats, RtoVerdict, RunRecord, TimedError, UtilSample,
    Violation as InvariantViolation,
};
pub use sim::{Ev, Purpose, SimOutput, Simulation, Trigger, TriggerAction};

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
pub enum OrchestratorError {
    #[error("a failover is already in progress (phase {0:?})")]
    AlreadyInProgress(Phase),
    #[error("burst capacity cannot cover demand: need {demand} cores, batch {preemptible} + cloud quota {cloud_quota}")]
    BurstUnsatisfiable { demand: u64, preemptible: u64, cloud_quota: u64 },
    #[error("failback requested while not failed over (phase {0:?})")]
    NotFailedOver(Phase),
    #[error("environment {0} is locked")]
    Locked(EnvId),
    #[error("no capacity for environment {0}")]
    CapacityUnavailable(EnvId),
    #[error("stability check failed after batch {batch}: availability {availability:.5}")]
    StabilityCheckFailed { batch: usize, availability: f64 },
    #[error("{0} replicas still serve on cloud hosts")]
    DrainBlocked(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Phases in the order a peak failover walks through them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Steady,
    Locked,
    Preheating,
    Evicting,
    Converting,
    Migrating,
    Restoring,
    FailedOver,
    FailingBack,
    Unlocking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MigrationStrategy {
    /// Terminate, then restore elsewhere.
    Bbm,
    /// Start elsewhere, flip routing, then terminate.
    Mbb,
}

pub fn strategy_for(class: FailureClass) -> Option<MigrationStrategy> {
    match class {
        FailureClass::ActiveMigrate => Some(MigrationStrategy::Mbb),
        FailureClass::RestoreLater => Some(MigrationStrategy::Bbm),
        _ => None,
    }
}

/// Restore-later downtime: wait for capacity, then start up.
pub fn bbm_downtime(terminated_at: SimTime, capacity_at: SimTime, startup: SimTime) -> SimTime {
    capacity_at.max(terminated_at) - terminated_at + startup
}

/// Bounded pool of concurrently outstanding migrations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationSlots {
    pub cap: usize,
    pub in_use: usize,
    pub peak: usize,
}

impl MigrationSlots {
    pub fn new(cap: usize) -> Self {
        MigrationSlots { cap, in_use: 0, peak: 0 }
    }

    pub fn try_acquire(&mut self) -> bool {
        if self.in_use >= self.cap {
            return false;
        }
        self.in_use += 1;
        self.peak = self.peak.max(self.in_use);
        true
    }

    pub fn release(&mut self) {
        self.in_use = self.in_use.saturating_sub(1);
    }

    pub fn available(&self) -> usize {
        self.cap - self.in_use.min(self.cap)
    }
}

/// Environments whose deployments and scaling are frozen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Locks {
    pub envs: BTreeSet<EnvId>,
}

impl Locks {
    /// Scale or deploy requests from outside the orchestrator.
    pub fn check(&self, env: EnvId) -> Result<(), OrchestratorError> {
        if self.envs.contains(&env) {
            Err(OrchestratorError::Locked(env))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    SpecialHardware,
    DenyListed,
    Stabilizing,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eligibility {
    pub enrolled: BTreeSet<ServiceId>,
    pub excluded: BTreeMap<ServiceId, Exclusion>,
    /// Enrolled but exempt from termination.
    pub offboarded: BTreeSet<ServiceId>,
}

/// Decides which services failover orchestration manages at `now`.
pub fn reconcile_eligibility(fleet: &Fleet, now: SimTime, offboarded: &BTreeSet<ServiceId>) -> Eligibility {
    let mut out = Eligibility::default();
    for s in &fleet.services {
        let reason = if s.special_hardware {
            Some(Exclusion::SpecialHardware)
        } else if s.deny_listed {
            Some(Exclusion::DenyListed)
        } else if !s.eligible_at(now) {
            Some(Exclusion::Stabilizing)
        } else {
            None
        };
        match reason {
            Some(r) => {
                out.excluded.insert(s.id, r);
            }
            None => {
                out.enrolled.insert(s.id);
                if offboarded.contains(&s.id) {
                    out.offboarded.insert(s.id);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub tick: SimTime,
    pub bucket: SimTime,
    /// Mode threshold on current over peak traffic.
    pub peak_threshold: f64,
    /// Peak request rate; defaults to the sum of city peak rates.
    pub peak_rps: Option<f64>,
    pub convergence: SimTime,
    pub city_batches: Vec<f64>,
    pub batch_interval: SimTime,
    pub slot_cap: usize,
    pub burst_margin: f64,
    /// Minimum availability of moved traffic for a batch to pass its
    /// stability check.
    pub health_floor: f64,
    pub base_error_rate: f64,
    /// Load a replica absorbs relative to its nominal share before
    /// requests start failing for capacity.
    pub replica_headroom: f64,
    /// Busy fraction of a replica's cores when it carries its full share
    /// of peak traffic.
    pub utilization_per_core: f64,
    pub cloud_host_cores: u32,
    pub alpha_m: f64,
    pub qos_enabled: bool,
    pub qos: QosConfig,
    pub spawner: SpawnerConfig,
    pub cloud: CloudProvider,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            tick: SimTime::from_secs(10),
            bucket: SimTime::from_mins(10),
            peak_threshold: 0.85,
            peak_rps: None,
            convergence: SimTime::from_secs(30),
            city_batches: vec![0.05, 0.15, 0.30, 0.50],
            batch_interval: SimTime::from_mins(2),
            slot_cap: 2000,
            burst_margin: 1.1,
            health_floor: 0.99,
            base_error_rate: 1e-4,
            replica_headroom: 1.2,
            utilization_per_core: 0.5,
            cloud_host_cores: 64,
            alpha_m: 0.75,
            qos_enabled: true,
            qos: QosConfig::default(),
            spawner: SpawnerConfig::default(),
            cloud: CloudProvider::default(),
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if self.tick.0 == 0 || self.bucket.0 == 0 {
            return bad("tick and bucket must be positive");
        }
        if !(self.peak_threshold > 0.0 && self.peak_threshold <= 1.0) {
            return bad("peak_threshold must be in (0, 1]");
        }
        if self.city_batches.is_empty() || self.city_batches.iter().any(|f| *f < 0.0) {
            return bad("city_batches must be non-empty and non-negative");
        }
        if self.replica_headroom < 1.0 {
            return bad("replica_headroom must be at least 1");
        }
        if self.slot_cap == 0 {
            return bad("slot_cap must be positive");
        }
        if !(0.0..=1.0).contains(&self.health_floor) {
            return bad("health_floor must be in [0, 1]");
        }
        self.spawner.validate().map_err(|e| OrchestratorError::Config(e.to_string()))
    }
}

/// Phase bookkeeping shared by failover and failback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestratorState {
    pub phase: Phase,
    pub mode: Option<Mode>,
    pub phase_entered_at: BTreeMap<Phase, SimTime>,
    pub locks: Locks,
}

impl Default for OrchestratorState {
    fn default() -> Self {
        OrchestratorState {
            phase: Phase::Steady,
            mode: None,
            phase_entered_at: BTreeMap::from([(Phase::Steady, SimTime::ZERO)]),
            locks: Locks::default(),
        }
    }
}

/// True if `phases` follows the machine: forward through a failover, then
/// forward through failback back to steady, any number of times.
pub fn phases_well_ordered(phases: &[Phase]) -> bool {
    let mut prev = Phase::Steady;
    for &p in phases {
        let ok = p > prev || (p == Phase::Steady && matches!(prev, Phase::Unlocking | Phase::Steady | Phase::Locked | Phase::Preheating | Phase::Evicting | Phase::Converting));
        if !ok && p != prev {
            return false;
        }
        prev = p;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{generate_fleet, production_profile, FleetGenConfig, TopologyConfig};

    #[test]
    fn strategies() {
        assert_eq!(strategy_for(FailureClass::RestoreLater), Some(MigrationStrategy::Bbm));
        assert_eq!(strategy_for(FailureClass::ActiveMigrate), Some(MigrationStrategy::Mbb));
        assert_eq!(strategy_for(FailureClass::AlwaysOn), None);
    }

    #[test]
    fn bbm_downtime_adds_wait_and_startup() {
        let d = bbm_downtime(SimTime::from_mins(5), SimTime::from_mins(13), SimTime::from_secs(90));
        assert_eq!(d, SimTime::from_secs(570));
    }

    #[test]
    fn slots_cap_parallelism() {
        let mut s = MigrationSlots::new(2000);
        let started = (0..2500).filter(|_| s.try_acquire()).count();
        assert_eq!((started, 2500 - started), (2000, 500));
        s.release();
        assert!(s.try_acquire());
        assert_eq!(s.peak, 2000);
    }

    #[test]
    fn locks_reject_outside_changes() {
        let locks = Locks { envs: BTreeSet::from([EnvId(3)]) };
        assert_eq!(locks.check(EnvId(3)), Err(OrchestratorError::Locked(EnvId(3))));
        assert!(locks.check(EnvId(4)).is_ok());
    }

    #[test]
    fn eligibility_examples() {
        let mut f = generate_fleet(&FleetGenConfig {
            profile: production_profile(20),
            scale: 0.0005,
            topology: TopologyConfig { cities: 4, ..TopologyConfig::default() },
            ..FleetGenConfig::default()
        })
        .unwrap();
        f.services[0].special_hardware = true;
        f.services[1].age_at_start = SimTime::from_days(3);
        f.services[2].age_at_start = SimTime::from_days(8);
        f.services[3].deny_listed = true;
        let off = BTreeSet::from([f.services[4].id]);
        let e = reconcile_eligibility(&f, SimTime::ZERO, &off);
        assert_eq!(e.excluded[&f.services[0].id], Exclusion::SpecialHardware);
        assert_eq!(e.excluded[&f.services[1].id], Exclusion::Stabilizing);
        assert!(e.enrolled.contains(&f.services[2].id));
        assert_eq!(e.excluded[&f.services[3].id], Exclusion::DenyListed);
        assert!(e.offboarded.contains(&f.services[4].id));
        // Four days later the young service has stabilized.
        let later = reconcile_eligibility(&f, SimTime::from_days(4), &off);
        assert!(later.enrolled.contains(&f.services[1].id));
    }

    #[test]
    fn phase_order() {
        use Phase::*;
        assert!(phases_well_ordered(&[Locked, Preheating, Evicting, Converting, Migrating, Restoring, FailedOver, FailingBack, Unlocking, Steady]));
        assert!(phases_well_ordered(&[Migrating, FailedOver, FailingBack, Unlocking, Steady, Locked]));
        assert!(!phases_well_ordered(&[Locked, Migrating, Preheating]));
        assert!(!phases_well_ordered(&[FailedOver, Steady]));
    }
}
