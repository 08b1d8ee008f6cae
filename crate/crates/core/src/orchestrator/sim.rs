use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::record::{BurstSample, ClassPoint, EvictionRecord, RtoVerdict, RunRecord, TimedError, UtilSample, Violation};
use super::{reconcile_eligibility, MigrationSlots, OrchestratorConfig, OrchestratorError, OrchestratorState, Phase};
use crate::burst::{batch_accepting, cloud_provision, convert_batch, estimate_burst_sufficiency, release_cloud, Conversion, Prefetch, Sufficiency};
use crate::fleet::{
    BatchJob, CityId, Cluster, ClusterId, ClusterKind, EnvId, FailureClass, Fleet, Host, HostId, Lifecycle, PlacementEntry, Pool,
    RegionId, ServiceId,
};
use crate::placement::{qos_tick, schedule, HostLoad, PlacementRequest, QosAction, ReplicaLoad};
use crate::simkernel::{EventKind, Scheduler, SeededRng, SimTime};
use crate::traffic::{
    detect_mode, geometric_batches, Adjacency, CheckResult, CityMigration, Evaluator, GraphState, IsolationPolicy, MigrationStatus,
    Mode, RootSampler, RoutingTable, ServiceHealth,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum TriggerAction {
    Failover { from: RegionId, to: RegionId },
    Failback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    pub at: SimTime,
    #[serde(flatten)]
    pub action: TriggerAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    MbbOut,
    RestoreOut,
    MbbBack,
    Reenable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ev {
    Tick,
    Failover { from: RegionId, to: RegionId },
    Failback,
    Phase { phase: Phase },
    PrefetchReady,
    EvictionDone { cluster: ClusterId },
    BurstCapacity { cluster: ClusterId, cores_online: u64 },
    CloudReady { tranche: usize, cores: u64 },
    ReplicasReady { env: EnvId, purpose: Purpose },
    CityBatch,
    StabilityCheck,
}

impl EventKind for Ev {
    fn kind(&self) -> &'static str {
        match self {
            Ev::Tick => "tick",
            Ev::Failover { .. } => "failover",
            Ev::Failback => "failback",
            Ev::Phase { .. } => "phase",
            Ev::PrefetchReady => "prefetch_ready",
            Ev::EvictionDone { .. } => "eviction_done",
            Ev::BurstCapacity { .. } => "burst_capacity",
            Ev::CloudReady { .. } => "cloud_ready",
            Ev::ReplicasReady { .. } => "replicas_ready",
            Ev::CityBatch => "city_batch",
            Ev::StabilityCheck => "stability_check",
        }
    }
}

/// Bookkeeping of one failover, kept until failback completes.
#[derive(Debug, Clone)]
struct FailoverRun {
    from: RegionId,
    to: RegionId,
    /// Migrated make-before-break: active-migrate envs plus off-boarded
    /// restore-later and terminate envs.
    managed: Vec<EnvId>,
    restore: Vec<EnvId>,
    terminate: Vec<EnvId>,
    mbb_queue: VecDeque<EnvId>,
    rl_queue: VecDeque<EnvId>,
    back_queue: VecDeque<EnvId>,
    reenable_queue: VecDeque<EnvId>,
    back_started: bool,
    in_flight: BTreeMap<EnvId, Purpose>,
    conversions: Vec<Conversion>,
    evicted: BTreeMap<ClusterId, Vec<BatchJob>>,
    cloud_cluster: Option<ClusterId>,
    terminated_at: BTreeMap<EnvId, SimTime>,
    restored: BTreeSet<EnvId>,
    home: BTreeMap<EnvId, (u32, Pool)>,
}

pub struct SimOutput {
    pub record: RunRecord,
    pub event_log: Vec<u8>,
    pub fleet: Fleet,
}

/// One deterministic run: the fleet, its traffic and the orchestrator.
pub struct Simulation {
    fleet: Fleet,
    cfg: OrchestratorConfig,
    sched: Scheduler<Ev>,
    requests_rng: ChaCha8Rng,
    cloud_rng: ChaCha8Rng,
    routing: RoutingTable,
    adjacency: Adjacency,
    order: Vec<ServiceId>,
    sampler: RootSampler,
    evaluator: Evaluator,
    env_by: [Vec<EnvId>; 2],
    external: BTreeSet<EnvId>,
    offboarded: BTreeSet<ServiceId>,
    state: OrchestratorState,
    run: Option<FailoverRun>,
    focus: RegionId,
    isolation: Option<IsolationPolicy>,
    prefetch: Prefetch,
    migration: Option<CityMigration>,
    window: super::Counts,
    slots: MigrationSlots,
    peak_rps: f64,
    record: RunRecord,
}

impl Simulation {
    pub fn new(
        fleet: Fleet,
        cfg: OrchestratorConfig,
        seed: u64,
        horizon: SimTime,
        triggers: &[Trigger],
        offboarded: BTreeSet<ServiceId>,
    ) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        let adjacency = Adjacency::new(&fleet, |e| e.ground_truth);
        let order = adjacency
            .propagating_order()
            .ok_or_else(|| OrchestratorError::Config("fail-close dependency cycle in the fleet".into()))?;
        let sampler = RootSampler::new(&fleet).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        let mut env_by = [vec![EnvId(u32::MAX); fleet.services.len()], vec![EnvId(u32::MAX); fleet.services.len()]];
        for e in &fleet.environments {
            env_by[e.region.index()][e.service.index()] = e.id;
        }
        if env_by.iter().flatten().any(|e| e.0 == u32::MAX) {
            return Err(OrchestratorError::Config("every service needs an environment in both regions".into()));
        }
        let external = fleet
            .environments
            .iter()
            .filter(|e| e.serving_replicas() == 0 && e.starting_replicas() == 0 && e.lifecycle == Lifecycle::Serving)
            .map(|e| e.id)
            .collect();
        let peak_rps = cfg.peak_rps.unwrap_or_else(|| fleet.cities.iter().map(|c| c.traffic.base_rps).sum());
        let rng = SeededRng::new(seed);
        let mut sched = Scheduler::new(horizon).with_log();
        let mut focus = RegionId(0);
        for t in triggers {
            let ev = match t.action {
                TriggerAction::Failover { from, to } => {
                    if from == to || from.index() > 1 || to.index() > 1 {
                        return Err(OrchestratorError::Config(format!("bad failover regions {from} -> {to}")));
                    }
                                Ev::Failover { from, to }
                }
                TriggerAction::Failback => Ev::Failback,
            };
            sched.schedule(t.at, ev).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        }
        if let Some(TriggerAction::Failover { to, .. }) = triggers.iter().map(|t| t.action).find(|a| matches!(a, TriggerAction::Failover { .. })) {
            focus = to;
        }
        sched.schedule(SimTime::ZERO, Ev::Tick).expect("time zero");
        let n = fleet.services.len();
        Ok(Simulation {
            routing: RoutingTable::from_fleet(&fleet),
            evaluator: Evaluator::new(n),
            requests_rng: rng.stream("requests"),
            cloud_rng: rng.stream("cloud"),
            adjacency,
            order,
            sampler,
            env_by,
            external,
            offboarded,
            state: OrchestratorState::default(),
            run: None,
            focus,
            isolation: None,
            prefetch: Prefetch::default(),
            migration: None,
            window: super::Counts::default(),
            slots: MigrationSlots::new(cfg.slot_cap),
            peak_rps,
            record: RunRecord {
                horizon,
                bucket: cfg.bucket,
                phases: vec![(SimTime::ZERO, Phase::Steady)],
                ..RunRecord::default()
            },
            sched,
            cfg,
            fleet,
        })
    }

    pub fn fleet(&self) -> &Fleet {
        &self.fleet
    }

    pub fn run(mut self) -> SimOutput {
        let horizon = self.sched.horizon();
        self.record_class_point();
        while let Some(ev) = self.sched.pop_next(horizon) {
            self.handle(ev.payload);
            self.check_invariants();
            self.record_class_point();
        }
        self.finish();
        SimOutput { event_log: self.sched.take_log(), record: self.record, fleet: self.fleet }
    }

    fn now(&self) -> SimTime {
        self.sched.now()
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Tick => {
                self.tick();
                self.sched.schedule_in(self.cfg.tick, Ev::Tick);
            }
            Ev::Failover { from, to } => {
                if let Err(e) = self.initiate_failover(from, to) {
                    self.error(e);
                }
            }
            Ev::Failback => {
                if let Err(e) = self.initiate_failback() {
                    self.error(e);
                }
            }
            Ev::Phase { .. } | Ev::PrefetchReady => {}
            Ev::EvictionDone { cluster } => self.eviction_done(cluster),
            Ev::BurstCapacity { cluster, cores_online } => self.burst_capacity(cluster, cores_online),
            Ev::CloudReady { tranche: _, cores } => self.cloud_ready(cores),
            Ev::ReplicasReady { env, purpose } => self.replicas_ready(env, purpose),
            Ev::CityBatch => self.city_batch(),
            Ev::StabilityCheck => self.stability_check(),
        }
    }

    fn error(&mut self, error: OrchestratorError) {
        let t = self.now();
        self.record.errors.push(TimedError { t, error });
    }

    fn enter(&mut self, phase: Phase) {
        let now = self.now();
        self.state.phase = phase;
        self.state.phase_entered_at.insert(phase, now);
        self.record.phases.push((now, phase));
        self.sched.schedule_in(SimTime::ZERO, Ev::Phase { phase });
    }

    fn env_of(&self, s: ServiceId, r: RegionId) -> EnvId {
        self.env_by[r.index()][s.index()]
    }

    /// Current request rate routed to `r` as a fraction of peak.
    fn load(&self, r: RegionId) -> f64 {
        let now = self.now();
        let rps: f64 = self.fleet.cities.iter().filter(|c| self.routing.region_of(c.id) == r).map(|c| c.traffic.rps_at(now)).sum();
        rps / self.peak_rps.max(f64::MIN_POSITIVE)
    }

    fn hosts_of_kind(&self, r: RegionId, kinds: &[ClusterKind]) -> Vec<HostId> {
        self.fleet
            .clusters
            .iter()
            .filter(|c| c.region == r && kinds.contains(&c.kind))
            .flat_map(|c| c.hosts.iter().copied())
            .collect()
    }

    fn is_steady_host(&self, h: HostId) -> bool {
        self.fleet.hosts.get(&h).is_some_and(|h| self.fleet.clusters[h.cluster.index()].kind == ClusterKind::SteadyState)
    }

    // ---- failover ----

    fn initiate_failover(&mut self, from: RegionId, to: RegionId) -> Result<(), OrchestratorError> {
        if self.state.phase != Phase::Steady {
            return Err(OrchestratorError::AlreadyInProgress(self.state.phase));
        }
        let now = self.now();
        let tv: f64 = self.fleet.cities.iter().map(|c| c.traffic.rps_at(now)).sum();
        let mode = detect_mode(tv, self.peak_rps, self.cfg.peak_threshold);
        self.focus = to;
        let mut run = FailoverRun {
            from,
            to,
            managed: Vec::new(),
            restore: Vec::new(),
            terminate: Vec::new(),
            mbb_queue: VecDeque::new(),
            rl_queue: VecDeque::new(),
            back_queue: VecDeque::new(),
            reenable_queue: VecDeque::new(),
            back_started: false,
            in_flight: BTreeMap::new(),
            conversions: Vec::new(),
            evicted: BTreeMap::new(),
            cloud_cluster: None,
            terminated_at: BTreeMap::new(),
            restored: BTreeSet::new(),
            home: BTreeMap::new(),
        };
        if mode == Mode::Peak {
            let elig = reconcile_eligibility(&self.fleet, now, &self.offboarded);
            for s in &self.fleet.services {
                if !elig.enrolled.contains(&s.id) {
                    continue;
                }
                let env = self.env_of(s.id, to);
                let off = elig.offboarded.contains(&s.id);
                match s.failure_class {
                    FailureClass::AlwaysOn => {}
                    FailureClass::ActiveMigrate => run.managed.push(env),
                    _ if off => run.managed.push(env),
                    FailureClass::RestoreLater => run.restore.push(env),
                    FailureClass::Terminate => run.terminate.push(env),
                }
            }
            let rank = |e: &EnvId| (self.fleet.service(self.fleet.env(*e).service).tier.rank(), *e);
            run.managed.sort_by_key(rank);
            run.restore.sort_by_key(rank);
            let full_cores = |e: &EnvId| self.fleet.service(self.fleet.env(*e).service).cores();
            let demand: u64 = run.managed.iter().chain(&run.restore).map(full_cores).sum();
            let batch: Vec<ClusterId> =
                self.fleet.clusters.iter().filter(|c| c.region == to && c.kind == ClusterKind::Batch).map(|c| c.id).collect();
            let preemptible: u64 = batch.iter().map(|c| self.fleet.clusters[c.index()].preemptible_cores()).sum();
            let cloud_quota = self.cfg.cloud.total_quota() - self.cfg.cloud.provisioned();
            if preemptible + cloud_quota < demand {
                return Err(OrchestratorError::BurstUnsatisfiable { demand, preemptible, cloud_quota });
            }
            self.record.modes.push((now, mode));
            self.state.mode = Some(mode);
            for e in &self.fleet.environments {
                run.home.insert(e.id, (e.required_replicas, e.placement.first().map_or(Pool::Stateless, |p| p.pool)));
            }

            // Lock every non-always-on environment.
            self.enter(Phase::Locked);
            for e in &mut self.fleet.environments {
                if self.fleet.services[e.service.index()].failure_class != FailureClass::AlwaysOn {
                    self.state.locks.envs.insert(e.id);
                    if e.region == to && e.lifecycle == Lifecycle::Serving {
                        e.lifecycle = Lifecycle::Locked;
                    }
                }
            }

            self.enter(Phase::Preheating);
            if let Some(at) = self.prefetch.preheat(now, &self.cfg.spawner) {
                self.sched.schedule(at, Ev::PrefetchReady).expect("future");
            }

            self.enter(Phase::Evicting);
            let needed = (demand as f64 * self.cfg.burst_margin).ceil() as u64;
            let mut left = needed;
            for id in batch {
                let cluster = &self.fleet.clusters[id.index()];
                let take = left.min(cluster.preemptible_cores());
                if take == 0 {
                    continue;
                }
                let conv = convert_batch(cluster, take, now, &self.cfg.spawner).expect("batch cluster");
                left -= take;
                self.fleet.clusters[id.index()].kind = ClusterKind::Burst;
                self.sched.schedule(now + conv.eviction_delay, Ev::EvictionDone { cluster: id }).expect("future");
                for (t, cores) in conv.series(SimTime::from_mins(1)) {
                    self.sched.schedule(t, Ev::BurstCapacity { cluster: id, cores_online: cores }).expect("future");
                }
                run.conversions.push(conv);
            }
            if let Sufficiency::Insufficient(short) = estimate_burst_sufficiency(demand, preemptible, self.cfg.burst_margin) {
                let plan = cloud_provision(&mut self.cfg.cloud, short, now, &mut self.cloud_rng);
                let zone = self.fleet.zones.iter().find(|z| z.region == to).map(|z| z.id).expect("region has zones");
                let id = ClusterId(self.fleet.clusters.len() as u32);
                self.fleet.clusters.push(Cluster { id, kind: ClusterKind::Cloud, region: to, zone, hosts: Vec::new(), jobs: Vec::new() });
                run.cloud_cluster = Some(id);
                for (i, tr) in plan.tranches.iter().enumerate() {
                    self.sched.schedule(tr.ready_at, Ev::CloudReady { tranche: i, cores: tr.cores }).expect("future");
                }
            }

            // Break-before-make: stop restore-later and terminate envs now.
            for (list, lifecycle) in [(&run.restore, Lifecycle::Terminated), (&run.terminate, Lifecycle::Disabled)] {
                for &env in list {
                    let old = std::mem::take(&mut self.fleet.env_mut(env).placement);
                    self.release(env, &old);
                    self.fleet.env_mut(env).lifecycle = lifecycle;
                    run.terminated_at.insert(env, now);
                    self.record.stopped_services.push(self.fleet.env(env).service);
                }
            }
            let exempt: BTreeSet<ServiceId> =
                self.fleet.services.iter().map(|s| s.id).filter(|s| elig.offboarded.contains(s) || !elig.enrolled.contains(s)).collect();
            let mut policy = IsolationPolicy::failover(now, self.cfg.convergence, exempt);
            policy.region = Some(to);
            self.isolation = Some(policy);
            run.mbb_queue = run.managed.iter().copied().collect();
            run.rl_queue = run.restore.iter().copied().collect();
            self.run = Some(run);
            if self.run.as_ref().is_some_and(|r| r.conversions.is_empty() && r.cloud_cluster.is_none()) {
                self.start_migrating();
            }
        } else {
            self.record.modes.push((now, mode));
            self.state.mode = Some(mode);
            self.run = Some(run);
            self.start_migrating();
        }
        Ok(())
    }

    fn start_migrating(&mut self) {
        if !matches!(self.state.phase, Phase::Steady | Phase::Evicting | Phase::Converting) {
            return;
        }
        self.enter(Phase::Migrating);
        let (from, to) = {
            let r = self.run.as_ref().expect("run");
            (r.from, r.to)
        };
        let cities: Vec<CityId> = self.routing.cities_in(from);
        self.migration = Some(CityMigration::new(to, geometric_batches(&cities, &self.cfg.city_batches), self.cfg.batch_interval));
        self.sched.schedule_in(SimTime::ZERO, Ev::CityBatch);
        self.pump();
        self.progress();
    }

    fn eviction_done(&mut self, cluster: ClusterId) {
        let now = self.now();
        let Some(run) = self.run.as_mut() else { return };
        let Some(conv) = run.conversions.iter().find(|c| c.cluster == cluster) else { return };
        let target = conv.target();
        let c = &mut self.fleet.clusters[cluster.index()];
        let mut evicted = Vec::new();
        let mut freed = 0u64;
        let mut kept = Vec::new();
        for job in std::mem::take(&mut c.jobs) {
            if job.preemptible && freed < target {
                freed += u64::from(job.cores);
                evicted.push(job);
            } else {
                kept.push(job);
            }
        }
        c.jobs = kept;
        self.record.evictions.push(EvictionRecord {
            t: now,
            cluster,
            jobs: evicted.len() as u32,
            cores: freed,
            restart_cost: SimTime(evicted.iter().map(|j| j.restart_cost.0).sum()),
        });
        run.evicted.insert(cluster, evicted);
        if self.state.phase == Phase::Evicting {
            self.enter(Phase::Converting);
        }
    }

    fn burst_capacity(&mut self, cluster: ClusterId, cores_online: u64) {
        let now = self.now();
        self.record.burst_series.push(BurstSample { t: now, cluster, cores_online });
        let hosts = self.fleet.clusters[cluster.index()].hosts.clone();
        let mut left = cores_online;
        for h in hosts {
            let host = self.fleet.hosts.get_mut(&h).expect("cluster host");
            let pool = left.min(u64::from(host.physical_cores)) as u32;
            host.stateless_pool = host.stateless_pool.max(pool);
            left -= u64::from(pool);
        }
        if cores_online > 0 {
            self.start_migrating();
        }
        self.pump();
        self.progress();
    }

    fn cloud_ready(&mut self, cores: u64) {
        let Some(cid) = self.run.as_ref().and_then(|r| r.cloud_cluster) else { return };
        let mem_per_core = self.fleet.hosts.values().next().map_or(8.0, |h| h.mem_per_core);
        let size = u64::from(self.cfg.cloud_host_cores.max(1));
        let mut left = cores;
        while left > 0 {
            let id = self.fleet.hosts.keys().next_back().map_or(HostId(0), |h| HostId(h.0 + 1));
            let c = &mut self.fleet.clusters[cid.index()];
            let pool = left.min(size) as u32;
            self.fleet.hosts.insert(
                id,
                Host {
                    id,
                    cluster: cid,
                    zone: c.zone,
                    physical_cores: pool,
                    mem_per_core,
                    stateless_pool: pool,
                    overcommit_pool: 0,
                    allocations: Vec::new(),
                },
            );
            c.hosts.push(id);
            left -= u64::from(pool);
        }
        self.start_migrating();
        self.pump();
        self.progress();
    }

    /// Places `replicas` of `env` on `hosts`, all or nothing.
    fn place(&mut self, env: EnvId, hosts: &[HostId], pool: Pool, replicas: u32) -> Option<Vec<PlacementEntry>> {
        let svc = self.fleet.service(self.fleet.env(env).service);
        let req = PlacementRequest {
            env,
            pool,
            replicas,
            cores_per_replica: svc.cores_per_replica,
            mem_per_replica: svc.mem_per_replica(),
        };
        let set: BTreeSet<HostId> = hosts.iter().copied().collect();
        let mut refs: Vec<&mut Host> = self.fleet.hosts.values_mut().filter(|h| set.contains(&h.id)).collect();
        let out = schedule(&[req], &mut refs, &BTreeMap::new(), self.cfg.alpha_m);
        let entries: Vec<PlacementEntry> =
            out.assignments.iter().map(|a| PlacementEntry { host: a.host, pool: a.pool, replicas: a.replicas }).collect();
        if out.placed_all() {
            Some(entries)
        } else {
            self.release(env, &entries);
            None
        }
    }

    fn release(&mut self, env: EnvId, entries: &[PlacementEntry]) {
        for p in entries {
            if let Some(h) = self.fleet.hosts.get_mut(&p.host) {
                h.release(env, p.pool, p.replicas);
            }
        }
    }

    fn start_replicas(&mut self, env: EnvId, entries: Vec<PlacementEntry>, purpose: Purpose) {
        let now = self.now();
        let base = self.fleet.service(self.fleet.env(env).service).base_startup;
        let startup = match purpose {
            Purpose::MbbOut | Purpose::RestoreOut => self.prefetch.startup(base, now, &self.cfg.spawner),
            Purpose::MbbBack | Purpose::Reenable => base,
        };
        let e = self.fleet.env_mut(env);
        e.starting = entries;
        if purpose == Purpose::RestoreOut {
            e.lifecycle = Lifecycle::Restoring;
        }
        self.slots.try_acquire();
        self.record.migration_slot_peak = self.record.migration_slot_peak.max(self.slots.peak);
        self.run.as_mut().expect("run").in_flight.insert(env, purpose);
        self.sched.schedule_in(startup, Ev::ReplicasReady { env, purpose });
    }

    /// Starts every queued migration that has a slot and fits.
    fn pump(&mut self) {
        let Some(mut run) = self.run.take() else { return };
        let phase = self.state.phase;
        let mut started_restore = false;
        if matches!(phase, Phase::Migrating | Phase::Restoring) {
            let burst = self.hosts_of_kind(run.to, &[ClusterKind::Burst, ClusterKind::Cloud]);
            self.run = Some(run);
            self.drain_queue(|r| &mut r.mbb_queue, &burst, Purpose::MbbOut, |_, e| e);
            run = self.run.take().expect("run");
            if run.mbb_queue.is_empty() {
                let before = run.rl_queue.len();
                self.run = Some(run);
                self.drain_queue(|r| &mut r.rl_queue, &burst, Purpose::RestoreOut, |_, e| e);
                run = self.run.take().expect("run");
                started_restore = run.rl_queue.len() < before;
            }
        } else if phase == Phase::FailingBack && run.back_started {
            let steady = self.hosts_of_kind(run.to, &[ClusterKind::SteadyState]);
            let home = run.home.clone();
            self.run = Some(run);
            self.drain_queue(|r| &mut r.back_queue, &steady, Purpose::MbbBack, |env, _| home[&env].1);
            self.drain_queue(|r| &mut r.reenable_queue, &steady, Purpose::Reenable, |env, _| home[&env].1);
            run = self.run.take().expect("run");
        }
        self.run = Some(run);
        if started_restore && self.state.phase == Phase::Migrating {
            self.enter(Phase::Restoring);
        }
    }

    fn drain_queue<Q, P>(&mut self, queue: Q, hosts: &[HostId], purpose: Purpose, pool_of: P)
    where
        Q: Fn(&mut FailoverRun) -> &mut VecDeque<EnvId>,
        P: Fn(EnvId, Pool) -> Pool,
    {
        let mut i = 0;
        loop {
            if self.slots.available() == 0 {
                return;
            }
            let Some(&env) = queue(self.run.as_mut().expect("run")).get(i) else { return };
            let replicas = match purpose {
                Purpose::MbbOut | Purpose::RestoreOut => self.fleet.service(self.fleet.env(env).service).replicas,
                Purpose::MbbBack | Purpose::Reenable => self.run.as_ref().expect("run").home[&env].0,
            };
            let pool = pool_of(env, Pool::Stateless);
            let placed = self.place(env, hosts, pool, replicas).or_else(|| {
                let other = if pool == Pool::Stateless { Pool::Overcommit } else { Pool::Stateless };
                matches!(purpose, Purpose::MbbBack | Purpose::Reenable).then(|| self.place(env, hosts, other, replicas)).flatten()
            });
            match placed {
                Some(entries) => {
                    queue(self.run.as_mut().expect("run")).remove(i);
                    self.start_replicas(env, entries, purpose);
                }
                None => i += 1,
            }
        }
    }

    fn replicas_ready(&mut self, env: EnvId, purpose: Purpose) {
        let now = self.now();
        self.slots.release();
        let Some(run) = self.run.as_mut() else { return };
        run.in_flight.remove(&env);
        if purpose == Purpose::RestoreOut {
            run.restored.insert(env);
        }
        let home = run.home.get(&env).map_or(0, |h| h.0);
        let terminated_at = run.terminated_at.get(&env).copied();
        let svc = self.fleet.env(env).service;
        let full = self.fleet.service(svc).replicas;
        let e = self.fleet.env_mut(env);
        let started = std::mem::take(&mut e.starting);
        match purpose {
            Purpose::MbbOut | Purpose::MbbBack => {
                let old = std::mem::replace(&mut e.placement, started);
                if purpose == Purpose::MbbOut {
                    e.required_replicas = full;
                    e.lifecycle = Lifecycle::Bursted;
                } else {
                    e.required_replicas = home;
                    e.lifecycle = Lifecycle::Locked;
                }
                self.release(env, &old);
            }
            Purpose::RestoreOut => {
                e.placement = started;
                e.required_replicas = full;
                e.lifecycle = Lifecycle::Bursted;
                if let Some(iso) = self.isolation.as_mut() {
                    iso.lift_service(svc, now);
                }
                let t0 = terminated_at.unwrap_or(now);
                let downtime = now - t0;
                let rto = FailureClass::RestoreLater.rto().expect("restore-later RTO");
                self.record.rto.push(RtoVerdict {
                    env,
                    service: svc,
                    terminated_at: t0,
                    restored_at: Some(now),
                    downtime: Some(downtime),
                    violated: downtime > rto,
                });
            }
            Purpose::Reenable => {
                e.placement = started;
                e.lifecycle = Lifecycle::Locked;
            }
        }
        if purpose == Purpose::MbbBack {
            self.check_batch_resume();
        }
        self.pump();
        self.progress();
    }

    /// Phase advances that depend on several activities finishing.
    fn progress(&mut self) {
        let Some(run) = self.run.as_ref() else { return };
        let idle = run.in_flight.is_empty();
        let cities_done = self.migration.as_ref().is_some_and(|m| m.status == MigrationStatus::Completed);
        match self.state.phase {
            Phase::Migrating | Phase::Restoring if idle && run.mbb_queue.is_empty() && run.rl_queue.is_empty() && cities_done => {
                self.enter(Phase::FailedOver);
            }
            Phase::FailingBack if cities_done && !run.back_started => {
                let run = self.run.as_mut().expect("run");
                run.back_started = true;
                let bursted: Vec<EnvId> = run.managed.iter().chain(&run.restore).copied().collect();
                run.back_queue = bursted.into_iter().filter(|e| self.fleet.env(*e).lifecycle == Lifecycle::Bursted).collect();
                run.reenable_queue = run.terminate.iter().copied().collect();
                self.pump();
                self.progress();
            }
            Phase::FailingBack if cities_done && idle && run.back_queue.is_empty() && run.reenable_queue.is_empty() => {
                self.finish_failback();
            }
            _ => {}
        }
    }

    fn check_batch_resume(&mut self) {
        let now = self.now();
        let Some(run) = self.run.as_ref() else { return };
        for conv in &run.conversions {
            if self.record.batch_resumed.contains_key(&conv.cluster) {
                continue;
            }
            let c = &self.fleet.clusters[conv.cluster.index()];
            let total: u64 = c.hosts.iter().map(|h| u64::from(self.fleet.hosts[h].physical_cores)).sum();
            let used: u64 = c.hosts.iter().map(|h| self.fleet.hosts[h].allocated(Pool::Stateless)).sum();
            if batch_accepting(total - used.min(total), total) {
                self.record.batch_resumed.insert(conv.cluster, now);
            }
        }
    }

    // ---- failback ----

    fn initiate_failback(&mut self) -> Result<(), OrchestratorError> {
        if self.state.phase != Phase::FailedOver {
            return Err(OrchestratorError::NotFailedOver(self.state.phase));
        }
        let (from, to) = {
            let r = self.run.as_ref().expect("failed over run");
            (r.from, r.to)
        };
        self.enter(Phase::FailingBack);
        let cities: Vec<CityId> =
            self.fleet.cities.iter().filter(|c| c.primary_region == from && self.routing.region_of(c.id) == to).map(|c| c.id).collect();
        self.migration = Some(CityMigration::new(from, geometric_batches(&cities, &self.cfg.city_batches), self.cfg.batch_interval));
        self.sched.schedule_in(SimTime::ZERO, Ev::CityBatch);
        self.progress();
        Ok(())
    }

    fn finish_failback(&mut self) {
        let now = self.now();
        let run = self.run.take().expect("run");
        if let Some(iso) = self.isolation.as_mut() {
            iso.lift(now);
        }
        self.check_batch_resume_for(&run);
        for conv in &run.conversions {
            let c = &mut self.fleet.clusters[conv.cluster.index()];
            c.kind = ClusterKind::Batch;
            if let Some(jobs) = run.evicted.get(&conv.cluster) {
                c.jobs.extend(jobs.iter().cloned());
                c.jobs.sort_by_key(|j| j.id);
            }
            for h in c.hosts.clone() {
                let host = self.fleet.hosts.get_mut(&h).expect("host");
                host.stateless_pool = 0;
                host.overcommit_pool = 0;
            }
        }
        if let Some(cid) = run.cloud_cluster {
            let serving: u32 = self.fleet.clusters[cid.index()]
                .hosts
                .iter()
                .flat_map(|h| self.fleet.hosts[h].allocations.iter())
                .map(|a| a.replicas)
                .sum();
            match release_cloud(&mut self.cfg.cloud, serving) {
                Ok(_) => {
                    for h in std::mem::take(&mut self.fleet.clusters[cid.index()].hosts) {
                        self.fleet.hosts.remove(&h);
                    }
                }
                Err(_) => self.error(OrchestratorError::DrainBlocked(serving)),
            }
        }
        self.enter(Phase::Unlocking);
        self.state.locks.envs.clear();
        for e in &mut self.fleet.environments {
            if e.lifecycle == Lifecycle::Locked {
                e.lifecycle = Lifecycle::Serving;
            }
        }
        self.enter(Phase::Steady);
        self.state.mode = None;
        self.migration = None;
        self.isolation = None;
    }

    fn check_batch_resume_for(&mut self, run: &FailoverRun) {
        let now = self.now();
        for conv in &run.conversions {
            self.record.batch_resumed.entry(conv.cluster).or_insert(now);
        }
    }

    // ---- city traffic ----

    /// True if every running environment in `region` can absorb the load
    /// it would carry after `batch` moves there.
    fn capacity_gate(&self, region: RegionId, batch: &[CityId]) -> bool {
        let now = self.now();
        let extra: f64 = batch.iter().map(|c| self.fleet.cities[c.index()].traffic.rps_at(now)).sum::<f64>() / self.peak_rps;
        let load = self.load(region) + extra;
        self.fleet.environments.iter().filter(|e| e.region == region && !self.external.contains(&e.id)).all(|e| {
            if !matches!(e.lifecycle, Lifecycle::Serving | Lifecycle::Locked | Lifecycle::Bursted) {
                return true;
            }
            let full = f64::from(self.fleet.services[e.service.index()].replicas);
            f64::from(e.serving_replicas()) * self.cfg.replica_headroom >= full * load - 1e-9
        })
    }

    fn city_batch(&mut self) {
        let Some(m) = self.migration.as_ref() else { return };
        if m.status != MigrationStatus::Running {
            return;
        }
        let Some(batch) = m.batches.get(m.next).cloned() else { return };
        if !self.capacity_gate(m.to, &batch) {
            self.sched.schedule_in(self.cfg.tick, Ev::CityBatch);
            return;
        }
        let now = self.now();
        let m = self.migration.as_mut().expect("migration");
        m.start_batch(&mut self.routing);
        let interval = m.interval;
        self.record.city_moves.push((now, batch.iter().map(|c| c.0).collect()));
        self.window = super::Counts::default();
        self.sched.schedule_in(interval, Ev::StabilityCheck);
    }

    fn stability_check(&mut self) {
        let floor = self.cfg.health_floor;
        let healthy = self.window.availability(true).is_none_or(|a| a >= floor);
        let availability = self.window.availability(true).unwrap_or(1.0);
        self.window = super::Counts::default();
        let Some(m) = self.migration.as_mut() else { return };
        let interval = m.interval;
        if let MigrationStatus::Paused { .. } = m.status {
            if healthy {
                m.resume();
                self.sched.schedule_in(SimTime::ZERO, Ev::CityBatch);
            } else {
                self.sched.schedule_in(interval, Ev::StabilityCheck);
            }
            return;
        }
        match m.check(healthy) {
            CheckResult::Continue => {
                self.sched.schedule_in(SimTime::ZERO, Ev::CityBatch);
            }
            CheckResult::Completed => self.progress(),
            CheckResult::Paused => {
                let batch = m.next;
                self.sched.schedule_in(interval, Ev::StabilityCheck);
                self.error(OrchestratorError::StabilityCheckFailed { batch, availability });
            }
        }
    }

    // ---- per-tick traffic, utilization and QoS ----

    fn health(&self, r: RegionId, load: f64) -> Vec<ServiceHealth> {
        let now = self.now();
        self.fleet
            .services
            .iter()
            .map(|s| {
                let env = self.fleet.env(self.env_of(s.id, r));
                let mut h = ServiceHealth::healthy();
                if self.external.contains(&env.id) {
                    return h;
                }
                match env.lifecycle {
                    Lifecycle::Disabled | Lifecycle::Terminated | Lifecycle::Restoring => {
                        h.down = true;
                        h.down_tagged = true;
                    }
                    _ if env.serving_replicas() == 0 => h.down = true,
                    _ => {
                        let need = f64::from(s.replicas) * load;
                        if need > 0.0 {
                            h.capacity_fraction = (f64::from(env.serving_replicas()) * self.cfg.replica_headroom / need).min(1.0);
                        }
                    }
                }
                if let Some(iso) = &self.isolation {
                    h.blocked_fraction = iso.blocked_fraction_in(r, s.id, s.failure_class, now);
                }
                h
            })
            .collect()
    }

    fn tick(&mut self) {
        let now = self.now();
        let loads = [self.load(RegionId(0)), self.load(RegionId(1))];
        let health = [self.health(RegionId(0), loads[0]), self.health(RegionId(1), loads[1])];
        let masks = [self.adjacency.may_fail(&self.order, &health[0]), self.adjacency.may_fail(&self.order, &health[1])];
        let secs = self.cfg.tick.as_secs_f64();
        let n_cities = self.fleet.cities.len();
        let n_services = self.fleet.services.len();
        let window_region = self.migration.as_ref().filter(|m| m.status != MigrationStatus::Completed).map(|m| m.to);
        for ci in 0..n_cities {
            let city = &self.fleet.cities[ci];
            let lambda = city.traffic.rps_at(now) * secs;
            if lambda <= 0.0 {
                continue;
            }
            let n = Poisson::new(lambda).map_or(0, |p| p.sample(&mut self.requests_rng) as u64);
            let r = self.routing.region_of(city.id);
            let g = GraphState { adjacency: &self.adjacency, health: &health[r.index()], base_error: self.cfg.base_error_rate, prune: Some(&masks[r.index()]) };
            for _ in 0..n {
                let root = self.sampler.sample(&mut self.requests_rng);
                let o = self.evaluator.evaluate(root, &g, &mut self.requests_rng).expect("acyclic propagating graph");
                let class = self.fleet.services[root.index()].failure_class;
                let critical = matches!(class, FailureClass::AlwaysOn | FailureClass::ActiveMigrate);
                if critical && window_region == Some(r) {
                    self.window.add(&o);
                }
                let b = self.record.bucket_mut(now, n_cities, n_services);
                b.by_class[class as usize].add(&o);
                b.by_city[ci].add(&o);
                b.by_service[root.index()].add(&o);
                if critical {
                    b.critical.add(&o);
                }
                self.record.requests += 1;
            }
        }
        self.record.bucket_mut(now, n_cities, n_services);
        self.sample_utilization(&loads);
    }

    /// Per-replica consumption of every env on steady hosts, in cores.
    fn consumption(&self, loads: &[f64; 2]) -> BTreeMap<EnvId, f64> {
        let mut out = BTreeMap::new();
        for e in &self.fleet.environments {
            let serving = e.serving_replicas();
            if serving == 0 || matches!(e.lifecycle, Lifecycle::Disabled | Lifecycle::Terminated | Lifecycle::Restoring) {
                continue;
            }
            let s = &self.fleet.services[e.service.index()];
            let c = f64::from(s.cores_per_replica);
            let total = self.cfg.utilization_per_core * c * f64::from(s.replicas) * loads[e.region.index()];
            out.insert(e.id, (total / f64::from(serving)).min(c));
        }
        out
    }

    fn sample_utilization(&mut self, loads: &[f64; 2]) {
        let now = self.now();
        let per_replica = self.consumption(loads);
        let mut consumed = [0.0f64; 2];
        let mut physical = [0.0f64; 2];
        let mut hot: Vec<HostLoad> = Vec::new();
        for r in [RegionId(0), RegionId(1)] {
            for h in self.fleet.steady_hosts(r) {
                let mut used = 0.0;
                let mut replicas = Vec::new();
                for a in &h.allocations {
                    let each = per_replica.get(&a.env).copied().unwrap_or(0.0);
                    used += each * f64::from(a.replicas);
                    if self.cfg.qos_enabled {
                        let class = self.fleet.class_of_env(a.env);
                        for _ in 0..a.replicas {
                            replicas.push(ReplicaLoad {
                                env: a.env,
                                class,
                                consumption: each / f64::from(h.physical_cores),
                                granted: f64::from(a.cores_per_replica) / f64::from(h.physical_cores),
                            });
                        }
                    }
                }
                consumed[r.index()] += used;
                physical[r.index()] += f64::from(h.physical_cores);
                let utilization = used / f64::from(h.physical_cores.max(1));
                if self.cfg.qos_enabled && utilization > self.cfg.qos.evict_above {
                    hot.push(HostLoad { host: h.id, utilization, replicas });
                }
            }
        }
        let regions = (0..2).map(|i| if physical[i] > 0.0 { consumed[i] / physical[i] } else { 0.0 }).collect();
        self.record.utilization.push(UtilSample { t: now, regions });
        for load in hot {
            let d = qos_tick(&load, &self.cfg.qos);
            for a in d.actions {
                match a {
                    QosAction::Evict { env, .. } => {
                        self.record.qos.evictions += 1;
                        self.evict_one(env, load.host);
                    }
                    QosAction::Throttle { .. } => self.record.qos.throttles += 1,
                    QosAction::Relocate { .. } => self.record.qos.relocations += 1,
                    QosAction::Alarm { .. } => self.record.qos.alarms += 1,
                }
            }
        }
    }

    fn evict_one(&mut self, env: EnvId, host: HostId) {
        let e = self.fleet.env_mut(env);
        let Some(i) = e.placement.iter().position(|p| p.host == host && p.replicas > 0) else { return };
        let pool = e.placement[i].pool;
        e.placement[i].replicas -= 1;
        if e.placement[i].replicas == 0 {
            e.placement.remove(i);
        }
        self.fleet.hosts.get_mut(&host).expect("host").release(env, pool, 1);
    }

    // ---- invariants and series ----

    fn check_invariants(&mut self) {
        let now = self.now();
        let mut found = Vec::new();
        let failed_over = self.state.phase == Phase::FailedOver;
        let terminate: BTreeSet<EnvId> = self.run.as_ref().map(|r| r.terminate.iter().copied().collect()).unwrap_or_default();
        let managed: BTreeSet<EnvId> = self.run.as_ref().map(|r| r.managed.iter().copied().collect()).unwrap_or_default();
        for e in &self.fleet.environments {
            if self.external.contains(&e.id) {
                continue;
            }
            let class = self.fleet.services[e.service.index()].failure_class;
            let serving = e.serving_replicas();
            if class == FailureClass::AlwaysOn && (serving < e.required_replicas || e.lifecycle != Lifecycle::Serving) {
                found.push(("always_on_safety", e.id, format!("{serving}/{} {:?}", e.required_replicas, e.lifecycle)));
            }
            if (class == FailureClass::ActiveMigrate || managed.contains(&e.id)) && serving < e.required_replicas {
                found.push(("mbb_zero_downtime", e.id, format!("{serving}/{}", e.required_replicas)));
            }
            if failed_over && terminate.contains(&e.id) && serving > 0 {
                found.push(("terminate_stays_down", e.id, format!("{serving} serving")));
            }
        }
        if let Some(run) = &self.run {
            let rto = FailureClass::RestoreLater.rto().expect("rto");
            for (env, t0) in &run.terminated_at {
                if !run.restored.contains(env)
                    && run.restore.contains(env)
                    && now - *t0 > rto
                    && !self.record.violations.iter().any(|v| v.env == Some(*env) && v.invariant == "restore_later_rto")
                {
                    found.push(("restore_later_rto", *env, format!("down since {t0}")));
                }
            }
        }
        for (invariant, env, detail) in found {
            self.record.violations.push(Violation { t: now, invariant: invariant.to_string(), env: Some(env), detail });
        }
    }

    fn record_class_point(&mut self) {
        let r = self.focus;
        let mut p = ClassPoint { t: self.now(), ..ClassPoint::default() };
        let (terminated, managed, stopped): (BTreeSet<EnvId>, BTreeSet<EnvId>, Option<BTreeSet<EnvId>>) = match &self.run {
            Some(run) => (
                run.restore.iter().copied().collect(),
                run.managed.iter().copied().collect(),
                Some(run.terminate.iter().copied().collect()),
            ),
            None => Default::default(),
        };
        for e in self.fleet.environments.iter().filter(|e| e.region == r) {
            let s = &self.fleet.services[e.service.index()];
            let cpr = u64::from(s.cores_per_replica);
            let placed = |steady: bool| -> u64 {
                e.placement.iter().chain(&e.starting).filter(|p| self.is_steady_host(p.host) == steady).map(|p| u64::from(p.replicas) * cpr).sum()
            };
            let required = u64::from(e.required_replicas) * cpr;
            let serving = u64::from(e.serving_replicas()) * cpr;
            let am = s.failure_class == FailureClass::ActiveMigrate || managed.contains(&e.id);
            match s.failure_class {
                FailureClass::AlwaysOn => p.ao += serving,
                _ if am => {
                    p.am_total += required;
                    p.am_steady += if self.external.contains(&e.id) { required } else { placed(true) };
                    p.am_bursted += placed(false);
                }
                FailureClass::RestoreLater => {
                    if terminated.contains(&e.id) {
                        let restored = u64::from(s.replicas) * cpr;
                        p.rl_terminated_total += restored;
                        if e.lifecycle == Lifecycle::Bursted {
                            p.rl_bursted += restored;
                        } else {
                            p.rl_not_bursted += restored;
                        }
                    } else {
                        p.rl_steady += serving;
                    }
                }
                FailureClass::Terminate => {
                    if stopped.as_ref().is_none_or(|t| t.contains(&e.id)) {
                        p.t_serving += serving;
                    }
                }
                FailureClass::ActiveMigrate => {}
            }
        }
        self.record.push_class_point(p);
    }

    fn finish(&mut self) {
        let horizon = self.record.horizon;
        let rto = FailureClass::RestoreLater.rto().expect("rto");
        if let Some(run) = &self.run {
            for env in &run.restore {
                if self.record.rto.iter().any(|v| v.env == *env) {
                    continue;
                }
                let t0 = run.terminated_at[env];
                self.record.rto.push(RtoVerdict {
                    env: *env,
                    service: self.fleet.env(*env).service,
                    terminated_at: t0,
                    restored_at: None,
                    downtime: None,
                    violated: horizon - t0 > rto,
                });
            }
        }
        for c in &mut self.fleet.cities {
            c.current_region = self.routing.region_of(c.id);
        }
        let cloud_hosts = self
            .fleet
            .hosts
            .values()
            .filter(|h| self.fleet.clusters[h.cluster.index()].kind == ClusterKind::Cloud)
            .count();
        self.record.final_state = super::record::FinalState {
            phase: Some(self.state.phase),
            cloud_hosts,
            cloud_provisioned: self.cfg.cloud.provisioned(),
            burst_clusters: self.fleet.clusters.iter().filter(|c| c.kind == ClusterKind::Burst).count(),
            locked_envs: self.state.locks.envs.len(),
        };
    }
}
