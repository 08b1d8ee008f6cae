//! City routing, synthetic workload, request evaluation over the
//! dependency graph, isolation policies and failover classification.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand_distr::{Distribution, Poisson, WeightedAliasIndex};
use serde::{Deserialize, Serialize};

use crate::depsafety::{DependencyEdge, Semantics, TraceRecord};
use crate::fleet::{CityId, FailureClass, Fleet, RegionId, ServiceId, Tier};
use crate::simkernel::{SeededRng, SimTime};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrafficError {
    #[error("dependency cycle through {0:?}")]
    CycleDetected(Vec<ServiceId>),
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Peak,
    NonPeak,
}

/// Peak iff `tv_failover ≥ t × tv_peak`.
pub fn detect_mode(tv_failover: f64, tv_peak: f64, t: f64) -> Mode {
    if tv_failover >= t * tv_peak {
        Mode::Peak
    } else {
        Mode::NonPeak
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailoverScope {
    pub peak: bool,
    pub full: bool,
}

impl FailoverScope {
    pub fn is_full_peak(&self) -> bool {
        self.peak && self.full
    }
}

/// Both conditions are strict ("more than").
pub fn classify_scope(users_on_trip: u64, weekly_peak_users: u64, cities_failed: u64, total_cities: u64) -> FailoverScope {
    FailoverScope {
        peak: users_on_trip as f64 > 0.85 * weekly_peak_users as f64,
        full: cities_failed as f64 > 0.5 * total_cities as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoutingTable {
    pub routes: BTreeMap<CityId, RegionId>,
}

impl RoutingTable {
    pub fn from_fleet(fleet: &Fleet) -> Self {
        RoutingTable { routes: fleet.cities.iter().map(|c| (c.id, c.current_region)).collect() }
    }

    pub fn region_of(&self, city: CityId) -> RegionId {
        self.routes[&city]
    }

    pub fn route(&mut self, city: CityId, region: RegionId) {
        self.routes.insert(city, region);
    }

    pub fn cities_in(&self, region: RegionId) -> Vec<CityId> {
        self.routes.iter().filter(|(_, r)| **r == region).map(|(c, _)| *c).collect()
    }

    pub fn counts(&self) -> BTreeMap<RegionId, usize> {
        let mut out = BTreeMap::new();
        for r in self.routes.values() {
            *out.entry(*r).or_default() += 1;
        }
        out
    }

    /// Share of the current request rate routed to `region`.
    pub fn traffic_share(&self, fleet: &Fleet, region: RegionId, t: SimTime) -> f64 {
        let total: f64 = fleet.cities.iter().map(|c| c.traffic.rps_at(t)).sum();
        if total <= 0.0 {
            return 0.0;
        }
        let here: f64 = fleet.cities.iter().filter(|c| self.routes.get(&c.id) == Some(&region)).map(|c| c.traffic.rps_at(t)).sum();
        here / total
    }
}

fn ramp(t: SimTime, start: SimTime, over: SimTime) -> f64 {
    if t < start {
        0.0
    } else if over.0 == 0 {
        1.0
    } else {
        ((t.0 - start.0) as f64 / over.0 as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationPolicy {
    pub blocked: BTreeSet<FailureClass>,
    #[serde(default)]
    pub exemptions: BTreeSet<ServiceId>,
    /// Region whose callees are blocked; `None` blocks everywhere.
    #[serde(default)]
    pub region: Option<RegionId>,
    pub applied_at: SimTime,
    pub convergence: SimTime,
    #[serde(default)]
    pub lifted_at: Option<SimTime>,
    #[serde(default)]
    pub service_lifts: BTreeMap<ServiceId, SimTime>,
}

impl IsolationPolicy {
    /// Blocks restore-later and terminate callees.
    pub fn failover(applied_at: SimTime, convergence: SimTime, exemptions: BTreeSet<ServiceId>) -> Self {
        IsolationPolicy {
            blocked: BTreeSet::from([FailureClass::RestoreLater, FailureClass::Terminate]),
            exemptions,
            region: None,
            applied_at,
            convergence,
            lifted_at: None,
            service_lifts: BTreeMap::new(),
        }
    }

    pub fn effective_at(&self) -> SimTime {
        self.applied_at + self.convergence
    }

    pub fn lift(&mut self, at: SimTime) -> SimTime {
        self.lifted_at = Some(at);
        at + self.convergence
    }

    pub fn lift_service(&mut self, service: ServiceId, at: SimTime) -> SimTime {
        self.service_lifts.entry(service).or_insert(at);
        at + self.convergence
    }

    /// Fraction of requests into `service` that are dropped at `t`.
    pub fn blocked_fraction(&self, service: ServiceId, class: FailureClass, t: SimTime) -> f64 {
        if !self.blocked.contains(&class) || self.exemptions.contains(&service) {
            return 0.0;
        }
        let mut f = ramp(t, self.applied_at, self.convergence);
        let lift = match (self.lifted_at, self.service_lifts.get(&service)) {
            (Some(a), Some(b)) => Some(a.min(*b)),
            (a, b) => a.or(b.copied()),
        };
        if let Some(l) = lift {
            f = f.min(1.0 - ramp(t, l, self.convergence));
        }
        f
    }

    pub fn blocked_fraction_in(&self, region: RegionId, service: ServiceId, class: FailureClass, t: SimTime) -> f64 {
        match self.region {
            Some(r) if r != region => 0.0,
            _ => self.blocked_fraction(service, class, t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    None,
    #[serde(rename = "blocked_dependency_failclose")]
    BlockedDependencyFailClose,
    Capacity,
    IsolationBlocked,
    /// Background error rate not attributable to the failover.
    Internal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub root: ServiceId,
    pub success: bool,
    pub cause: FailureCause,
    pub failover_tagged: bool,
    /// Service whose own failure caused the outcome.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub culprit: Option<ServiceId>,
}

/// Per-service health seen by requests in one region at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceHealth {
    /// Not running at all.
    pub down: bool,
    /// `down` was caused deliberately by the failover.
    pub down_tagged: bool,
    pub blocked_fraction: f64,
    /// Probability a request finds enough serving capacity.
    pub capacity_fraction: f64,
}

impl ServiceHealth {
    pub fn healthy() -> Self {
        ServiceHealth { down: false, down_tagged: false, blocked_fraction: 0.0, capacity_fraction: 1.0 }
    }

    pub fn may_fail(&self) -> bool {
        self.down || self.blocked_fraction > 0.0 || self.capacity_fraction < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub callee: ServiceId,
    pub semantics: Semantics,
    /// Index of the first edge that produced this arc.
    pub edge: usize,
}

/// Service-level call graph. Parallel endpoint edges between the same
/// two services collapse to the most failure-propagating semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    out: Vec<Vec<Arc>>,
}

impl Adjacency {
    pub fn new(fleet: &Fleet, semantics: impl Fn(&DependencyEdge) -> Semantics) -> Self {
        Self::from_edges(fleet.services.len(), &fleet.dependencies, semantics)
    }

    pub fn from_edges(services: usize, edges: &[DependencyEdge], semantics: impl Fn(&DependencyEdge) -> Semantics) -> Self {
        let strength = |s: Semantics| match s {
            Semantics::FailOpen => 0,
            Semantics::Indeterminate => 1,
            Semantics::FailClose => 2,
        };
        let mut out: Vec<Vec<Arc>> = vec![Vec::new(); services];
        for (i, e) in edges.iter().enumerate() {
            let s = semantics(e);
            let list = &mut out[e.caller.service.index()];
            match list.iter_mut().find(|a| a.callee == e.callee.service) {
                Some(a) if strength(s) > strength(a.semantics) => {
                    a.semantics = s;
                    a.edge = i;
                }
                Some(_) => {}
                None => list.push(Arc { callee: e.callee.service, semantics: s, edge: i }),
            }
        }
        for list in &mut out {
            list.sort_by_key(|a| a.callee);
        }
        Adjacency { out }
    }

    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }

    pub fn arcs(&self, s: ServiceId) -> &[Arc] {
        &self.out[s.index()]
    }

    /// Callers before callees over every arc; `None` if there is a cycle.
    pub fn topological_order(&self) -> Option<Vec<ServiceId>> {
        self.order_by(|_| true)
    }

    /// As `topological_order`, over failure-propagating arcs only.
    pub fn propagating_order(&self) -> Option<Vec<ServiceId>> {
        self.order_by(|a| a.semantics.propagates())
    }

    fn order_by(&self, keep: impl Fn(&Arc) -> bool) -> Option<Vec<ServiceId>> {
        let n = self.out.len();
        let mut indeg = vec![0usize; n];
        for list in &self.out {
            for a in list.iter().filter(|a| keep(a)) {
                indeg[a.callee.index()] += 1;
            }
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|i| indeg[*i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            order.push(ServiceId(i as u32));
            for a in self.out[i].iter().filter(|a| keep(a)) {
                let j = a.callee.index();
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Services whose requests could fail given `health`: risky themselves
    /// or reaching a risky service over propagating arcs. `order` must be
    /// a propagating topological order.
    pub fn may_fail(&self, order: &[ServiceId], health: &[ServiceHealth]) -> Vec<bool> {
        let mut out = vec![false; self.out.len()];
        for s in order.iter().rev() {
            let i = s.index();
            out[i] = health[i].may_fail()
                || self.out[i].iter().any(|a| a.semantics.propagates() && out[a.callee.index()]);
        }
        out
    }
}

pub struct GraphState<'a> {
    pub adjacency: &'a Adjacency,
    pub health: &'a [ServiceHealth],
    /// Probability a root request fails for unrelated reasons.
    pub base_error: f64,
    /// Optional `may_fail` mask; services outside it are known to succeed.
    pub prune: Option<&'a [bool]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Own {
    DownTagged,
    DownUntagged,
    Blocked,
    Capacity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Failure {
    origin: ServiceId,
    kind: Own,
}

const UNSEEN: u8 = 0;
const ON_PATH: u8 = 1;
const DONE: u8 = 2;

/// Reusable depth-first evaluator; one memo per request so every service
/// is resolved once per request.
pub struct Evaluator {
    mark: Vec<u8>,
    result: Vec<Option<Failure>>,
    touched: Vec<usize>,
    path: Vec<ServiceId>,
}

impl Evaluator {
    pub fn new(services: usize) -> Self {
        Evaluator { mark: vec![UNSEEN; services], result: vec![None; services], touched: Vec::new(), path: Vec::new() }
    }

    pub fn evaluate<R: Rng + ?Sized>(
        &mut self,
        root: ServiceId,
        g: &GraphState<'_>,
        rng: &mut R,
    ) -> Result<RequestOutcome, TrafficError> {
        if root.index() >= g.adjacency.len() {
            return Err(TrafficError::Invalid(format!("unknown root {root}")));
        }
        let internal = g.base_error > 0.0 && rng.gen::<f64>() < g.base_error;
        let visited = self.visit(root, g, rng);
        for i in self.touched.drain(..) {
            self.mark[i] = UNSEEN;
            self.result[i] = None;
        }
        self.path.clear();
        let failure = visited?;
        let mut o = RequestOutcome { root, success: true, cause: FailureCause::None, failover_tagged: false, culprit: None };
        match failure {
            Some(f) if f.origin == root => {
                o.success = false;
                o.culprit = Some(root);
                (o.cause, o.failover_tagged) = match f.kind {
                    Own::DownTagged | Own::Blocked => (FailureCause::IsolationBlocked, true),
                    Own::DownUntagged | Own::Capacity => (FailureCause::Capacity, false),
                };
            }
            Some(f) => {
                o.success = false;
                o.culprit = Some(f.origin);
                o.cause = match f.kind {
                    Own::DownTagged | Own::Blocked => FailureCause::BlockedDependencyFailClose,
                    Own::DownUntagged | Own::Capacity => FailureCause::Capacity,
                };
            }
            None if internal => {
                o.success = false;
                o.cause = FailureCause::Internal;
                o.culprit = Some(root);
            }
            None => {}
        }
        Ok(o)
    }

    fn visit<R: Rng + ?Sized>(&mut self, s: ServiceId, g: &GraphState<'_>, rng: &mut R) -> Result<Option<Failure>, TrafficError> {
        let i = s.index();
        match self.mark[i] {
            DONE => return Ok(self.result[i]),
            ON_PATH => {
                let start = self.path.iter().position(|p| *p == s).unwrap_or(0);
                let mut cycle = self.path[start..].to_vec();
                cycle.push(s);
                return Err(TrafficError::CycleDetected(cycle));
            }
            _ => {}
        }
        if let Some(mask) = g.prune {
            if !mask[i] {
                return Ok(None);
            }
        }
        self.mark[i] = ON_PATH;
        self.touched.push(i);
        self.path.push(s);
        let h = &g.health[i];
        let own = if h.down {
            Some(if h.down_tagged { Own::DownTagged } else { Own::DownUntagged })
        } else if h.blocked_fraction > 0.0 && rng.gen::<f64>() < h.blocked_fraction {
            Some(Own::Blocked)
        } else if h.capacity_fraction < 1.0 && rng.gen::<f64>() >= h.capacity_fraction {
            Some(Own::Capacity)
        } else {
            None
        };
        let mut result = own.map(|kind| Failure { origin: s, kind });
        if result.is_none() {
            for a in g.adjacency.arcs(s) {
                if !a.semantics.propagates() {
                    continue;
                }
                if let Some(f) = self.visit(a.callee, g, rng)? {
                    result = Some(f);
                    break;
                }
            }
        }
        self.path.pop();
        self.mark[i] = DONE;
        self.result[i] = result;
        Ok(result)
    }
}

/// One-off evaluation; prefer a reused [`Evaluator`] in loops.
pub fn evaluate_request<R: Rng + ?Sized>(root: ServiceId, g: &GraphState<'_>, rng: &mut R) -> Result<RequestOutcome, TrafficError> {
    Evaluator::new(g.adjacency.len()).evaluate(root, g, rng)
}

/// Splits `cities` into consecutive batches whose cumulative sizes follow
/// the cumulative `fractions` (rounded half up); empty batches are dropped.
pub fn geometric_batches(cities: &[CityId], fractions: &[f64]) -> Vec<Vec<CityId>> {
    let total: f64 = fractions.iter().sum();
    let mut out = Vec::new();
    let mut acc = 0.0;
    let mut taken = 0usize;
    for (k, f) in fractions.iter().enumerate() {
        acc += f;
        let upto = if k + 1 == fractions.len() {
            cities.len()
        } else {
            ((acc / total * cities.len() as f64) + 0.5).floor() as usize
        }
        .min(cities.len());
        if upto > taken {
            out.push(cities[taken..upto].to_vec());
            taken = upto;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MigrationStatus {
    Running,
    Paused { batch: usize },
    Completed,
}

/// Batched city move with a stability check after each batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityMigration {
    pub to: RegionId,
    pub batches: Vec<Vec<CityId>>,
    pub interval: SimTime,
    pub next: usize,
    pub status: MigrationStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckResult {
    Continue,
    Completed,
    Paused,
}

impl CityMigration {
    pub fn new(to: RegionId, batches: Vec<Vec<CityId>>, interval: SimTime) -> Self {
        let status = if batches.is_empty() { MigrationStatus::Completed } else { MigrationStatus::Running };
        CityMigration { to, batches, interval, next: 0, status }
    }

    /// When the last stability check passes if every batch is healthy.
    pub fn completion_time(&self, start: SimTime) -> SimTime {
        start + SimTime(self.interval.0 * self.batches.len() as u64)
    }

    /// Routes the next batch; returns it, or `None` when nothing is left
    /// or the migration is paused.
    pub fn start_batch(&mut self, routing: &mut RoutingTable) -> Option<Vec<CityId>> {
        if self.status != MigrationStatus::Running || self.next >= self.batches.len() {
            return None;
        }
        let batch = self.batches[self.next].clone();
        for c in &batch {
            routing.route(*c, self.to);
        }
        self.next += 1;
        Some(batch)
    }

    /// Stability check for the batch just routed.
    pub fn check(&mut self, healthy: bool) -> CheckResult {
        if !healthy {
            self.status = MigrationStatus::Paused { batch: self.next };
            return CheckResult::Paused;
        }
        if self.next >= self.batches.len() {
            self.status = MigrationStatus::Completed;
            CheckResult::Completed
        } else {
            CheckResult::Continue
        }
    }

    pub fn resume(&mut self) {
        if let MigrationStatus::Paused { .. } = self.status {
            self.status = MigrationStatus::Running;
        }
    }

    pub fn moved(&self) -> usize {
        self.batches[..self.next].iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub completed_at: Option<SimTime>,
    pub paused_at_batch: Option<usize>,
    pub moved: usize,
}

/// Runs a migration to completion or pause with `healthy(batch)` deciding
/// each stability check (batches numbered from 1).
pub fn run_migration(
    routing: &mut RoutingTable,
    migration: &mut CityMigration,
    start: SimTime,
    mut healthy: impl FnMut(usize) -> bool,
) -> MigrationReport {
    let mut t = start;
    while let Some(_batch) = migration.start_batch(routing) {
        t += migration.interval;
        match migration.check(healthy(migration.next)) {
            CheckResult::Continue => {}
            CheckResult::Completed => {
                return MigrationReport { completed_at: Some(t), paused_at_batch: None, moved: migration.moved() };
            }
            CheckResult::Paused => {
                return MigrationReport { completed_at: None, paused_at_batch: Some(migration.next), moved: migration.moved() };
            }
        }
    }
    let done = migration.status == MigrationStatus::Completed;
    MigrationReport { completed_at: done.then_some(t), paused_at_batch: None, moved: migration.moved() }
}

/// Draws root services for user requests: production services weighted by
/// their core footprint.
#[derive(Debug, Clone)]
pub struct RootSampler {
    services: Vec<ServiceId>,
    alias: WeightedAliasIndex<f64>,
}

impl RootSampler {
    pub fn new(fleet: &Fleet) -> Result<Self, TrafficError> {
        let services: Vec<ServiceId> = fleet.services.iter().filter(|s| s.tier != Tier::NP).map(|s| s.id).collect();
        let weights: Vec<f64> = services.iter().map(|s| fleet.service(*s).cores().max(1) as f64).collect();
        let alias = WeightedAliasIndex::new(weights).map_err(|e| TrafficError::Invalid(format!("no root services: {e}")))?;
        Ok(RootSampler { services, alias })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ServiceId {
        self.services[self.alias.sample(rng)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    pub duration: SimTime,
    /// Sub-call records generated per root request.
    pub calls_per_request: u32,
    /// Probability a sub-call's callee fails.
    pub fault_rate: f64,
    /// Probability the recorded caller outcome is flipped.
    pub label_noise: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig { duration: SimTime::from_hours(1), calls_per_request: 1, fault_rate: 0.01, label_noise: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootRequest {
    pub timestamp: SimTime,
    pub city: CityId,
    pub service: ServiceId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub roots: Vec<RootRequest>,
    pub trace: Vec<TraceRecord>,
}

/// Per-second Poisson arrivals per city following its traffic series; each
/// root emits sub-call records over edges drawn by call-volume weight.
pub fn generate_workload(fleet: &Fleet, seed: u64, cfg: &WorkloadConfig) -> Result<Workload, TrafficError> {
    if fleet.dependencies.is_empty() {
        return Err(TrafficError::Invalid("fleet has no dependency edges".into()));
    }
    let roots = RootSampler::new(fleet)?;
    let edges = WeightedAliasIndex::new(fleet.dependencies.iter().map(|e| e.weight.max(0.0)).collect::<Vec<_>>())
        .map_err(|e| TrafficError::Invalid(format!("edge weights: {e}")))?;
    let mut rng = SeededRng::new(seed).stream("workload");
    let mut out = Workload::default();
    let seconds = cfg.duration.0 / 1000;
    for sec in 0..seconds {
        let t = SimTime::from_secs(sec);
        for city in &fleet.cities {
            let rate = city.traffic.rps_at(t);
            if rate <= 0.0 {
                continue;
            }
            let n = Poisson::new(rate).map_or(0, |p| p.sample(&mut rng) as u64);
            for _ in 0..n {
                let service = roots.sample(&mut rng);
                let timestamp = t + SimTime(rng.gen_range(0..1000));
                out.roots.push(RootRequest { timestamp, city: city.id, service });
                for _ in 0..cfg.calls_per_request {
                    let e = &fleet.dependencies[edges.sample(&mut rng)];
                    let callee_failed = rng.gen_bool(cfg.fault_rate.clamp(0.0, 1.0));
                    let mut caller_failed = callee_failed && e.ground_truth == Semantics::FailClose;
                    if cfg.label_noise > 0.0 && rng.gen_bool(cfg.label_noise.clamp(0.0, 1.0)) {
                        caller_failed = !caller_failed;
                    }
                    out.trace.push(TraceRecord { timestamp, caller: e.caller, callee: e.callee, callee_failed, caller_failed });
                }
            }
        }
    }
    out.roots.sort_by_key(|r| (r.timestamp, r.city));
    out.trace.sort_by_key(|r| r.timestamp);
    Ok(out)
}

/// Cross-tier volume shares of a trace, indexed by tier rank.
pub fn tier_volume_shares(fleet: &Fleet, trace: &[TraceRecord]) -> [[f64; 7]; 7] {
    let mut m = [[0.0; 7]; 7];
    for r in trace {
        let a = fleet.service(r.caller.service).tier.rank();
        let b = fleet.service(r.callee.service).tier.rank();
        m[a][b] += 1.0;
    }
    let total = trace.len().max(1) as f64;
    for row in &mut m {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depsafety::Endpoint;
    use crate::fleet::{generate_fleet, production_profile, FleetGenConfig, TopologyConfig, PRODUCTION_CALL_VOLUME};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mode_boundaries() {
        assert_eq!(detect_mode(90.0, 100.0, 0.85), Mode::Peak);
        assert_eq!(detect_mode(84.0, 100.0, 0.85), Mode::NonPeak);
        assert_eq!(detect_mode(85.0, 100.0, 0.85), Mode::Peak);
    }

    #[test]
    fn scope_boundaries() {
        assert!(classify_scope(86, 100, 51, 100).is_full_peak());
        assert_eq!(classify_scope(85, 100, 60, 100), FailoverScope { peak: false, full: true });
        assert_eq!(classify_scope(90, 100, 50, 100), FailoverScope { peak: true, full: false });
    }

    fn edge(a: u32, b: u32, s: Semantics) -> DependencyEdge {
        DependencyEdge::between(ServiceId(a), ServiceId(b), s)
    }

    fn blocked() -> ServiceHealth {
        ServiceHealth { blocked_fraction: 1.0, ..ServiceHealth::healthy() }
    }

    fn eval(edges: &[DependencyEdge], health: &[ServiceHealth]) -> RequestOutcome {
        let adj = Adjacency::from_edges(health.len(), edges, |e| e.ground_truth);
        let g = GraphState { adjacency: &adj, health, base_error: 0.0, prune: None };
        evaluate_request(ServiceId(0), &g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn evaluation_examples() {
        let h = [ServiceHealth::healthy(), blocked()];
        assert!(eval(&[edge(0, 1, Semantics::FailOpen)], &h).success);
        let o = eval(&[edge(0, 1, Semantics::FailClose)], &h);
        assert!(!o.success);
        assert_eq!(o.cause, FailureCause::BlockedDependencyFailClose);
        assert_eq!(o.culprit, Some(ServiceId(1)));
        let healthy = [ServiceHealth::healthy(); 2];
        assert!(eval(&[edge(0, 1, Semantics::FailClose)], &healthy).success);
        // Unknown semantics are treated as fail-close.
        assert!(!eval(&[edge(0, 1, Semantics::Indeterminate)], &h).success);
    }

    #[test]
    fn blocked_root_is_tagged() {
        let o = eval(&[], &[blocked()]);
        assert_eq!((o.cause, o.failover_tagged), (FailureCause::IsolationBlocked, true));
        let down = ServiceHealth { down: true, ..ServiceHealth::healthy() };
        let o = eval(&[], &[down]);
        assert_eq!((o.cause, o.failover_tagged), (FailureCause::Capacity, false));
    }

    #[test]
    fn cycles_detected() {
        let adj = Adjacency::from_edges(2, &[edge(0, 1, Semantics::FailClose), edge(1, 0, Semantics::FailClose)], |e| e.ground_truth);
        assert!(adj.topological_order().is_none());
        let h = [ServiceHealth::healthy(); 2];
        let g = GraphState { adjacency: &adj, health: &h, base_error: 0.0, prune: None };
        let err = evaluate_request(ServiceId(0), &g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert_eq!(err, TrafficError::CycleDetected(vec![ServiceId(0), ServiceId(1), ServiceId(0)]));
    }

    #[test]
    fn deep_chains_propagate() {
        let edges: Vec<_> = (0..5).map(|i| edge(i, i + 1, Semantics::FailClose)).collect();
        let mut h = vec![ServiceHealth::healthy(); 6];
        h[5] = blocked();
        assert_eq!(eval(&edges, &h).culprit, Some(ServiceId(5)));
        let mut open = edges.clone();
        open[2].ground_truth = Semantics::FailOpen;
        assert!(eval(&open, &h).success);
    }

    proptest! {
        #[test]
        fn fail_open_graph_never_fails_on_blocked_callees(
            pairs in proptest::collection::vec((0u32..8, 0u32..8), 0..30),
            blocked_mask in proptest::collection::vec(any::<bool>(), 8),
        ) {
            let edges: Vec<_> = pairs.iter().filter(|(a, b)| a < b).map(|(a, b)| edge(*a, *b, Semantics::FailOpen)).collect();
            let mut h: Vec<ServiceHealth> = blocked_mask.iter().map(|b| if *b { blocked() } else { ServiceHealth::healthy() }).collect();
            h[0] = ServiceHealth::healthy();
            prop_assert!(eval(&edges, &h).success);
        }

        #[test]
        fn pruning_never_changes_outcomes(
            pairs in proptest::collection::vec((0u32..8, 0u32..8, 0u8..3), 0..30),
            risky in proptest::collection::vec(0u8..4, 8),
            seed in 0u64..1000,
        ) {
            let sems = [Semantics::FailOpen, Semantics::FailClose, Semantics::Indeterminate];
            let edges: Vec<_> = pairs.iter().filter(|(a, b, _)| a < b).map(|(a, b, s)| edge(*a, *b, sems[*s as usize])).collect();
            let h: Vec<ServiceHealth> = risky.iter().map(|r| match r {
                0 => ServiceHealth { down: true, down_tagged: true, ..ServiceHealth::healthy() },
                1 => blocked(),
                _ => ServiceHealth::healthy(),
            }).collect();
            let adj = Adjacency::from_edges(8, &edges, |e| e.ground_truth);
            let order = adj.propagating_order().unwrap();
            let mask = adj.may_fail(&order, &h);
            for root in 0..8 {
                let full = GraphState { adjacency: &adj, health: &h, base_error: 0.0, prune: None };
                let pruned = GraphState { prune: Some(&mask), ..full };
                let a = evaluate_request(ServiceId(root), &full, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let b = evaluate_request(ServiceId(root), &pruned, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                prop_assert_eq!(a.success, b.success);
                prop_assert_eq!(a.cause, b.cause);
            }
        }
    }

    #[test]
    fn isolation_ramp() {
        let mut p = IsolationPolicy::failover(SimTime::ZERO, SimTime::from_secs(30), BTreeSet::from([ServiceId(9)]));
        let rl = FailureClass::RestoreLater;
        assert_eq!(p.effective_at(), SimTime::from_secs(30));
        assert_eq!(p.blocked_fraction(ServiceId(1), rl, SimTime::from_secs(30)), 1.0);
        assert!((p.blocked_fraction(ServiceId(1), rl, SimTime::from_secs(15)) - 0.5).abs() < 1e-12);
        for s in [0, 15, 30, 3600] {
            assert_eq!(p.blocked_fraction(ServiceId(9), rl, SimTime::from_secs(s)), 0.0);
        }
        assert_eq!(p.blocked_fraction(ServiceId(1), FailureClass::AlwaysOn, SimTime::from_secs(60)), 0.0);
        assert_eq!(p.lift(SimTime::from_secs(100)), SimTime::from_secs(130));
        assert!((p.blocked_fraction(ServiceId(1), rl, SimTime::from_secs(115)) - 0.5).abs() < 1e-12);
        assert_eq!(p.blocked_fraction(ServiceId(1), rl, SimTime::from_secs(130)), 0.0);
    }

    #[test]
    fn service_lift_is_independent() {
        let mut p = IsolationPolicy::failover(SimTime::ZERO, SimTime::from_secs(30), BTreeSet::new());
        p.lift_service(ServiceId(2), SimTime::from_secs(60));
        let t = SimTime::from_secs(90);
        assert_eq!(p.blocked_fraction(ServiceId(2), FailureClass::Terminate, t), 0.0);
        assert_eq!(p.blocked_fraction(ServiceId(3), FailureClass::Terminate, t), 1.0);
    }

    fn cities(n: u32) -> (RoutingTable, Vec<CityId>) {
        let ids: Vec<CityId> = (0..n).map(CityId).collect();
        (RoutingTable { routes: ids.iter().map(|c| (*c, RegionId(0))).collect() }, ids)
    }

    #[test]
    fn migration_examples() {
        let interval = SimTime::from_mins(2);
        let (mut rt, ids) = cities(1);
        let mut m = CityMigration::new(RegionId(1), geometric_batches(&ids, &[0.05, 0.15, 0.30, 0.50]), interval);
        let r = run_migration(&mut rt, &mut m, SimTime::ZERO, |_| true);
        assert_eq!(r.completed_at, Some(interval));
        assert_eq!(rt.region_of(CityId(0)), RegionId(1));

        let (mut rt, ids) = cities(100);
        let batches: Vec<Vec<CityId>> = ids.chunks(25).map(<[CityId]>::to_vec).collect();
        let mut m = CityMigration::new(RegionId(1), batches.clone(), interval);
        assert_eq!(m.completion_time(SimTime::ZERO), SimTime::from_mins(8));
        let r = run_migration(&mut rt, &mut m, SimTime::ZERO, |_| true);
        assert_eq!((r.completed_at, r.moved), (Some(SimTime::from_mins(8)), 100));
        assert_eq!(rt.cities_in(RegionId(1)).len(), 100);

        let (mut rt, _) = cities(100);
        let mut m = CityMigration::new(RegionId(1), batches, interval);
        let r = run_migration(&mut rt, &mut m, SimTime::ZERO, |b| b != 2);
        assert_eq!(r.paused_at_batch, Some(2));
        assert_eq!(r.completed_at, None);
        assert!((50..100).all(|c| rt.region_of(CityId(c)) == RegionId(0)));
        assert_eq!(rt.counts().values().sum::<usize>(), 100);
    }

    #[test]
    fn geometric_batch_sizes() {
        let ids: Vec<CityId> = (0..50).map(CityId).collect();
        let b = geometric_batches(&ids, &[0.05, 0.15, 0.30, 0.50]);
        let sizes: Vec<usize> = b.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 7, 15, 25]);
    }

    fn small_fleet() -> Fleet {
        generate_fleet(&FleetGenConfig {
            seed: 5,
            scale: 0.001,
            profile: production_profile(60),
            avg_out_degree: 4.0,
            topology: TopologyConfig { cities: 8, ..TopologyConfig::default() },
            ..FleetGenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn single_edge_takes_all_volume() {
        let mut f = small_fleet();
        let a = f.services.iter().find(|s| s.tier == Tier::T1).unwrap().id;
        let b = f.services.iter().rev().find(|s| s.tier == Tier::T1).unwrap().id;
        f.dependencies = vec![DependencyEdge {
            caller: Endpoint { service: a, endpoint: 0 },
            callee: Endpoint { service: b, endpoint: 0 },
            semantics: Semantics::Indeterminate,
            ground_truth: Semantics::FailOpen,
            weight: 1.0,
        }];
        let w = generate_workload(&f, 1, &WorkloadConfig { duration: SimTime::from_secs(60), ..Default::default() }).unwrap();
        let m = tier_volume_shares(&f, &w.trace);
        assert_eq!(m[Tier::T1.rank()][Tier::T1.rank()], 1.0);
    }

    #[test]
    fn workload_is_replayable_and_table_shaped() {
        let f = small_fleet();
        let cfg = WorkloadConfig { duration: SimTime::from_secs(10_000), ..Default::default() };
        let a = generate_workload(&f, 3, &cfg).unwrap();
        assert_eq!(a, generate_workload(&f, 3, &cfg).unwrap());
        assert!(a.trace.len() >= 90_000, "{}", a.trace.len());
        let m = tier_volume_shares(&f, &a.trace);
        let total: f64 = PRODUCTION_CALL_VOLUME.iter().flatten().sum();
        let expect = PRODUCTION_CALL_VOLUME[1][1] / total;
        assert!((m[1][1] - expect).abs() / expect < 0.10, "{} vs {}", m[1][1], expect);
    }

    #[test]
    fn no_edges_rejected() {
        let mut f = small_fleet();
        f.dependencies.clear();
        assert!(generate_workload(&f, 1, &WorkloadConfig::default()).is_err());
    }
}
