//! Fleet domain model: tiers, failure classes, services and their per-region
//! environments, hosts, clusters, cities, and the dependency graph.

mod capacity;
mod generate;
mod topology;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::depsafety::{DependencyEdge, Semantics};
use crate::simkernel::SimTime;

pub use capacity::{capacity_ratio, CapacityPolicy, Provisioning};
pub use generate::{
    generate_fleet, production_profile, FailCloseFractions, FleetGenConfig, ProfileRow, TierProfile,
    DESK_SERVICE_MIX, PRODUCTION_CALL_VOLUME, PRODUCTION_CORES, PRODUCTION_ENDPOINTS,
};
pub use topology::{build_topology, Layout, Topology, TopologyConfig};

pub const SCHEMA_VERSION: u32 = 1;

macro_rules! id_type {
    ($name:ident, $inner:ty, $prefix:literal) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(ServiceId, u32, "svc-");
id_type!(EnvId, u32, "env-");
id_type!(HostId, u32, "host-");
id_type!(ClusterId, u32, "cluster-");
id_type!(CityId, u32, "city-");
id_type!(ZoneId, u32, "zone-");
id_type!(RegionId, u8, "region-");

/// Business-criticality tier. `T0` outranks `T1`, ..., `T5`, and `NP` ranks
/// below everything, so `Tier::T0 > Tier::NP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tier {
    T0,
    T1,
    T2,
    T3,
    T4,
    T5,
    NP,
}

impl Tier {
    pub const ALL: [Tier; 7] = [Tier::T0, Tier::T1, Tier::T2, Tier::T3, Tier::T4, Tier::T5, Tier::NP];

    /// 0 for `T0` through 6 for `NP`; lower is more critical.
    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::T0 => "T0",
            Tier::T1 => "T1",
            Tier::T2 => "T2",
            Tier::T3 => "T3",
            Tier::T4 => "T4",
            Tier::T5 => "T5",
            Tier::NP => "NP",
        }
    }
}

impl Ord for Tier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.rank().cmp(&self.rank())
    }
}

impl PartialOrd for Tier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Failover behaviour of a service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureClass {
    /// Never preempted; expands into its dedicated buffer.
    AlwaysOn,
    /// Brought up elsewhere before the original is stopped.
    ActiveMigrate,
    /// Stopped immediately, restored within the hour.
    RestoreLater,
    /// Stopped until failback.
    Terminate,
}

impl FailureClass {
    pub const ALL: [FailureClass; 4] = [
        FailureClass::AlwaysOn,
        FailureClass::ActiveMigrate,
        FailureClass::RestoreLater,
        FailureClass::Terminate,
    ];

    pub fn rto(self) -> Option<SimTime> {
        match self {
            FailureClass::AlwaysOn => Some(SimTime::from_secs(1)),
            FailureClass::ActiveMigrate => Some(SimTime::from_secs(10)),
            FailureClass::RestoreLater => Some(SimTime::from_hours(1)),
            FailureClass::Terminate => None,
        }
    }

    /// Classes that are stopped (and possibly restored) on a peak failover.
    pub fn is_preemptible(self) -> bool {
        matches!(self, FailureClass::RestoreLater | FailureClass::Terminate)
    }

    pub fn short(self) -> &'static str {
        match self {
            FailureClass::AlwaysOn => "AO",
            FailureClass::ActiveMigrate => "AM",
            FailureClass::RestoreLater => "RL",
            FailureClass::Terminate => "T",
        }
    }
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

pub fn default_class_for_tier(tier: Tier) -> FailureClass {
    match tier {
        Tier::T0 | Tier::T1 => FailureClass::AlwaysOn,
        Tier::T2 => FailureClass::ActiveMigrate,
        Tier::T3 | Tier::T4 | Tier::T5 => FailureClass::RestoreLater,
        Tier::NP => FailureClass::Terminate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Service {
    pub id: ServiceId,
    pub name: String,
    pub tier: Tier,
    pub failure_class: FailureClass,
    pub endpoints: u32,
    pub cores_per_replica: u32,
    /// Memory per service core in GB.
    pub mem_per_core: f64,
    pub base_startup: SimTime,
    /// Replicas needed to serve the whole (global) load at peak.
    pub replicas: u32,
    #[serde(default)]
    pub special_hardware: bool,
    #[serde(default)]
    pub deny_listed: bool,
    /// How long the service has existed when the simulation starts.
    #[serde(default = "default_age")]
    pub age_at_start: SimTime,
}

fn default_age() -> SimTime {
    SimTime::from_days(30)
}

impl Service {
    pub fn cores(&self) -> u64 {
        u64::from(self.replicas) * u64::from(self.cores_per_replica)
    }

    pub fn mem_per_replica(&self) -> f64 {
        self.mem_per_core * f64::from(self.cores_per_replica)
    }

    /// Whether failover orchestration may manage the service at `now`:
    /// no special hardware, not deny-listed, and past stabilization.
    pub fn eligible_at(&self, now: SimTime) -> bool {
        !self.special_hardware && !self.deny_listed && self.age_at_start + now >= STABILIZATION
    }
}

/// Age a service must reach before it is onboarded.
pub const STABILIZATION: SimTime = SimTime::from_days(7);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Production,
    Canary,
    Staging,
    Shadow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Stateless,
    Overcommit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Serving,
    Locked,
    Disabled,
    Terminated,
    Bursted,
    Restoring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementEntry {
    pub host: HostId,
    pub pool: Pool,
    pub replicas: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceEnvironment {
    pub id: EnvId,
    pub service: ServiceId,
    pub region: RegionId,
    pub kind: EnvKind,
    pub required_replicas: u32,
    /// Replicas currently serving traffic.
    pub placement: Vec<PlacementEntry>,
    /// Replicas holding resources but still starting up.
    #[serde(default)]
    pub starting: Vec<PlacementEntry>,
    pub lifecycle: Lifecycle,
}

impl ServiceEnvironment {
    pub fn serving_replicas(&self) -> u32 {
        self.placement.iter().map(|p| p.replicas).sum()
    }

    pub fn starting_replicas(&self) -> u32 {
        self.starting.iter().map(|p| p.replicas).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub env: EnvId,
    pub pool: Pool,
    pub replicas: u32,
    pub cores_per_replica: u32,
    pub mem_per_replica: f64,
}

impl Allocation {
    pub fn cores(&self) -> u64 {
        u64::from(self.replicas) * u64::from(self.cores_per_replica)
    }

    pub fn mem(&self) -> f64 {
        f64::from(self.replicas) * self.mem_per_replica
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Host {
    pub id: HostId,
    pub cluster: ClusterId,
    pub zone: ZoneId,
    pub physical_cores: u32,
    /// GB of memory per physical core.
    pub mem_per_core: f64,
    pub stateless_pool: u32,
    pub overcommit_pool: u32,
    #[serde(default)]
    pub allocations: Vec<Allocation>,
}

impl Host {
    pub fn pool_capacity(&self, pool: Pool) -> u32 {
        match pool {
            Pool::Stateless => self.stateless_pool,
            Pool::Overcommit => self.overcommit_pool,
        }
    }

    pub fn allocated(&self, pool: Pool) -> u64 {
        self.allocations.iter().filter(|a| a.pool == pool).map(Allocation::cores).sum()
    }

    pub fn free(&self, pool: Pool) -> u64 {
        u64::from(self.pool_capacity(pool)).saturating_sub(self.allocated(pool))
    }

    pub fn mem_allocated(&self) -> f64 {
        self.allocations.iter().map(Allocation::mem).sum()
    }

    /// Memory ceiling under the safe allocation fraction `alpha_m`.
    pub fn mem_cap(&self, alpha_m: f64) -> f64 {
        alpha_m * f64::from(self.physical_cores) * self.mem_per_core
    }

    /// Adds `replicas` to the env's allocation in `pool`, merging with an
    /// existing grant.
    pub fn grant(&mut self, env: EnvId, pool: Pool, replicas: u32, cores: u32, mem: f64) {
        if let Some(a) = self.allocations.iter_mut().find(|a| a.env == env && a.pool == pool) {
            a.replicas += replicas;
        } else {
            self.allocations.push(Allocation {
                env,
                pool,
                replicas,
                cores_per_replica: cores,
                mem_per_replica: mem,
            });
        }
    }

    /// Removes up to `replicas` of the env's grant in `pool`; returns how
    /// many were released.
    pub fn release(&mut self, env: EnvId, pool: Pool, replicas: u32) -> u32 {
        let Some(i) = self.allocations.iter().position(|a| a.env == env && a.pool == pool) else {
            return 0;
        };
        let take = replicas.min(self.allocations[i].replicas);
        self.allocations[i].replicas -= take;
        if self.allocations[i].replicas == 0 {
            self.allocations.remove(i);
        }
        take
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterKind {
    SteadyState,
    Batch,
    Burst,
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchJob {
    pub id: u32,
    pub cores: u32,
    pub preemptible: bool,
    pub restart_cost: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: ClusterId,
    pub kind: ClusterKind,
    pub region: RegionId,
    pub zone: ZoneId,
    pub hosts: Vec<HostId>,
    #[serde(default)]
    pub jobs: Vec<BatchJob>,
}

impl Cluster {
    pub fn preemptible_cores(&self) -> u64 {
        self.jobs.iter().filter(|j| j.preemptible).map(|j| u64::from(j.cores)).sum()
    }

    pub fn job_cores(&self) -> u64 {
        self.jobs.iter().map(|j| u64::from(j.cores)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: RegionId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: ZoneId,
    pub region: RegionId,
    pub canary: bool,
    /// Fraction of the region's traffic landing in this zone.
    pub traffic_share: f64,
}

/// Per-city request rate: `base_rps` at the daily peak, dipping by
/// `diurnal_amplitude` at the trough twelve hours later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSeries {
    pub base_rps: f64,
    #[serde(default)]
    pub diurnal_amplitude: f64,
    #[serde(default)]
    pub peak_at: SimTime,
}

impl TrafficSeries {
    pub fn multiplier(&self, t: SimTime) -> f64 {
        if self.diurnal_amplitude == 0.0 {
            return 1.0;
        }
        let day = 86_400_000.0;
        let phase = (t.0 as f64 - self.peak_at.0 as f64) / day * std::f64::consts::TAU;
        1.0 - self.diurnal_amplitude * (1.0 - phase.cos()) / 2.0
    }

    pub fn rps_at(&self, t: SimTime) -> f64 {
        self.base_rps * self.multiplier(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub id: CityId,
    pub name: String,
    pub primary_region: RegionId,
    pub current_region: RegionId,
    pub traffic: TrafficSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    pub schema_version: u32,
    pub regions: Vec<Region>,
    pub zones: Vec<Zone>,
    pub clusters: Vec<Cluster>,
    pub hosts: BTreeMap<HostId, Host>,
    pub services: Vec<Service>,
    pub environments: Vec<ServiceEnvironment>,
    pub cities: Vec<City>,
    pub dependencies: Vec<DependencyEdge>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FleetError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("unsupported fleet schema version {0}")]
    SchemaVersion(u32),
    #[error("fleet must have exactly two regions, found {0}")]
    RegionCount(usize),
    #[error("{what} {id} is referenced but does not exist")]
    Dangling { what: &'static str, id: String },
    #[error("{0}")]
    Invalid(String),
}

impl Fleet {
    pub fn service(&self, id: ServiceId) -> &Service {
        &self.services[id.index()]
    }

    pub fn env(&self, id: EnvId) -> &ServiceEnvironment {
        &self.environments[id.index()]
    }

    pub fn env_mut(&mut self, id: EnvId) -> &mut ServiceEnvironment {
        &mut self.environments[id.index()]
    }

    pub fn class_of_env(&self, id: EnvId) -> FailureClass {
        self.service(self.env(id).service).failure_class
    }

    pub fn service_by_name(&self, name: &str) -> Option<&Service> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn region_by_name(&self, name: &str) -> Option<RegionId> {
        self.regions.iter().find(|r| r.name == name).map(|r| r.id)
    }

    pub fn other_region(&self, r: RegionId) -> RegionId {
        RegionId(1 - r.0)
    }

    /// Production-or-not environment of `service` in `region`.
    pub fn env_of(&self, service: ServiceId, region: RegionId) -> Option<EnvId> {
        self.environments
            .iter()
            .find(|e| e.service == service && e.region == region)
            .map(|e| e.id)
    }

    pub fn region_of_host(&self, host: HostId) -> RegionId {
        let h = &self.hosts[&host];
        self.clusters[h.cluster.index()].region
    }

    pub fn cluster_of_host(&self, host: HostId) -> &Cluster {
        &self.clusters[self.hosts[&host].cluster.index()]
    }

    pub fn total_core_demand(&self) -> u64 {
        self.services.iter().map(Service::cores).sum()
    }

    pub fn cores_by_tier(&self) -> BTreeMap<usize, u64> {
        let mut out = BTreeMap::new();
        for s in &self.services {
            *out.entry(s.tier.rank()).or_insert(0) += s.cores();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fleet serializes")
    }

    pub fn from_json(text: &str) -> Result<Fleet, FleetError> {
        let fleet: Fleet =
            serde_json::from_str(text).map_err(|e| FleetError::Invalid(e.to_string()))?;
        fleet.validate()?;
        Ok(fleet)
    }

    /// Referential integrity and the documented structural invariants.
    pub fn validate(&self) -> Result<(), FleetError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(FleetError::SchemaVersion(self.schema_version));
        }
        if self.regions.len() != 2 {
            return Err(FleetError::RegionCount(self.regions.len()));
        }
        for (i, s) in self.services.iter().enumerate() {
            if s.id.index() != i {
                return Err(FleetError::Invalid(format!("service {} stored at index {i}", s.id)));
            }
            if s.cores_per_replica == 0 || s.mem_per_core <= 0.0 || s.endpoints == 0 {
                return Err(FleetError::Invalid(format!(
                    "service {} needs positive cores, memory and endpoints",
                    s.name
                )));
            }
        }
        for (i, e) in self.environments.iter().enumerate() {
            if e.id.index() != i {
                return Err(FleetError::Invalid(format!("environment {} stored at index {i}", e.id)));
            }
            let Some(svc) = self.services.get(e.service.index()) else {
                return Err(FleetError::Dangling { what: "service", id: e.service.to_string() });
            };
            if e.kind != EnvKind::Production && svc.failure_class != FailureClass::Terminate {
                return Err(FleetError::Invalid(format!(
                    "non-production environment {} belongs to {} service {}",
                    e.id, svc.failure_class, svc.name
                )));
            }
            for p in e.placement.iter().chain(&e.starting) {
                if !self.hosts.contains_key(&p.host) {
                    return Err(FleetError::Dangling { what: "host", id: p.host.to_string() });
                }
            }
        }
        for h in self.hosts.values() {
            if self.clusters.get(h.cluster.index()).is_none() {
                return Err(FleetError::Dangling { what: "cluster", id: h.cluster.to_string() });
            }
        }
        for e in &self.dependencies {
            for s in [e.caller.service, e.callee.service] {
                if s.index() >= self.services.len() {
                    return Err(FleetError::Dangling { what: "service", id: s.to_string() });
                }
            }
        }
        Ok(())
    }

    /// Edge list with ground-truth semantics keyed by edge index.
    pub fn ground_truth(&self) -> BTreeMap<usize, Semantics> {
        self.dependencies.iter().enumerate().map(|(i, e)| (i, e.ground_truth)).collect()
    }

    pub fn steady_hosts(&self, region: RegionId) -> impl Iterator<Item = &Host> {
        self.hosts.values().filter(move |h| {
            let c = &self.clusters[h.cluster.index()];
            c.region == region && c.kind == ClusterKind::SteadyState
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tier_order_puts_t0_on_top_and_np_last() {
        assert!(Tier::T0 > Tier::T1);
        assert!(Tier::T5 > Tier::NP);
        let mut v = Tier::ALL.to_vec();
        v.sort();
        assert_eq!(v.first(), Some(&Tier::NP));
        assert_eq!(v.last(), Some(&Tier::T0));
    }

    #[test]
    fn default_classes() {
        use FailureClass::*;
        let expect = [AlwaysOn, AlwaysOn, ActiveMigrate, RestoreLater, RestoreLater, RestoreLater, Terminate];
        for (t, c) in Tier::ALL.iter().zip(expect) {
            assert_eq!(default_class_for_tier(*t), c, "{t}");
        }
    }

    #[test]
    fn rto_per_class() {
        assert!(FailureClass::AlwaysOn.rto().unwrap() < SimTime::from_mins(1));
        assert_eq!(FailureClass::RestoreLater.rto(), Some(SimTime::from_hours(1)));
        assert_eq!(FailureClass::Terminate.rto(), None);
    }

    #[test]
    fn diurnal_multiplier_peaks_at_one() {
        let s = TrafficSeries { base_rps: 10.0, diurnal_amplitude: 0.5, peak_at: SimTime::from_hours(18) };
        assert!((s.multiplier(SimTime::from_hours(18)) - 1.0).abs() < 1e-12);
        assert!((s.multiplier(SimTime::from_hours(6)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn host_grant_and_release() {
        let mut h = Host {
            id: HostId(0),
            cluster: ClusterId(0),
            zone: ZoneId(0),
            physical_cores: 64,
            mem_per_core: 8.0,
            stateless_pool: 64,
            overcommit_pool: 32,
            allocations: vec![],
        };
        h.grant(EnvId(1), Pool::Overcommit, 2, 4, 16.0);
        h.grant(EnvId(1), Pool::Overcommit, 1, 4, 16.0);
        assert_eq!(h.free(Pool::Overcommit), 20);
        assert_eq!(h.free(Pool::Stateless), 64);
        assert_eq!(h.release(EnvId(1), Pool::Overcommit, 5), 3);
        assert!(h.allocations.is_empty());
    }
}
