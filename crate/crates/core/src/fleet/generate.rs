//! Seeded synthetic fleet generator.
//!
//! Per-tier core budgets, endpoint percentiles and the cross-tier call
//! volume matrix come from a [`TierProfile`]; the shipped
//! [`production_profile`] carries production-scale proportions.
//! Per-service sizes are a modeling choice: replica sizes are drawn from a
//! small set and replica counts are filled until the tier budget is met.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::topology::{build_topology, TopologyConfig};
use super::{
    default_class_for_tier, FailureClass, Fleet, FleetError, Service, ServiceId, Tier,
    SCHEMA_VERSION,
};
use crate::depsafety::{DependencyEdge, Endpoint, Semantics};
use crate::simkernel::{SeededRng, SimTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub tier: Tier,
    /// Baseline cores at full scale.
    pub cores: f64,
    /// Number of services to generate for this tier (not scaled).
    pub services: u32,
    #[serde(default = "one")]
    pub endpoints_p50: f64,
    #[serde(default = "one")]
    pub endpoints_p90: f64,
    #[serde(default = "max_endpoints")]
    pub endpoints_max: u32,
}

fn one() -> f64 {
    1.0
}

fn max_endpoints() -> u32 {
    1
}

/// Per-tier proportions plus a caller-tier × callee-tier call volume matrix
/// (rows and columns in `Tier::ALL` order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierProfile {
    pub rows: Vec<ProfileRow>,
    #[serde(default)]
    pub call_volume: Option<[[f64; 7]; 7]>,
}

const T: f64 = 1e12;
const B: f64 = 1e9;
const M: f64 = 1e6;

/// Weekly cross-tier request counts, caller rows by callee columns.
pub const PRODUCTION_CALL_VOLUME: [[f64; 7]; 7] = [
    [47.1 * B, 940.0 * B, 2.30 * T, 1.82 * T, 144.0 * B, 100.0 * B, 1.77 * T],
    [10.7 * B, 21.8 * T, 2.24 * T, 387.0 * B, 6.07 * B, 70.4 * B, 18.6 * T],
    [25.3 * B, 2.02 * T, 663.0 * B, 77.0 * B, 30.9 * M, 1.17 * B, 2.70 * T],
    [7.95 * B, 288.0 * B, 119.0 * B, 16.9 * B, 192.0 * M, 6.09 * B, 1.06 * T],
    [788.0 * M, 11.5 * B, 599.0 * M, 228.0 * M, 1.19 * B, 12.1 * M, 22.1 * B],
    [290.0 * M, 76.1 * B, 266.0 * M, 849.0 * M, 1.30 * M, 4.52 * B, 14.1 * B],
    [107.0 * B, 1.53 * T, 471.0 * B, 126.0 * B, 12.8 * B, 18.3 * B, 3.13 * T],
];

/// Baseline cores per tier at production scale.
pub const PRODUCTION_CORES: [f64; 7] = [201e3, 3.03e6, 400e3, 254e3, 23.1e3, 22.1e3, 249e3];

/// Endpoints per service: (p50, p90, max) per tier.
pub const PRODUCTION_ENDPOINTS: [(f64, f64, u32); 7] = [
    (7.0, 79.0, 153),
    (10.0, 96.0, 1416),
    (11.0, 82.0, 629),
    (3.0, 38.0, 1059),
    (2.0, 22.0, 116),
    (2.0, 13.0, 1953),
    (1.0, 18.0, 1594),
];

/// Desk-scale split of the service count across tiers. Production counts
/// are dominated by tiny non-production services; a few hundred services
/// need a flatter mix to give every tier more than a handful of members.
pub const DESK_SERVICE_MIX: [f64; 7] = [0.04, 0.30, 0.15, 0.20, 0.06, 0.06, 0.19];

/// Production proportions with `total_services` spread by [`DESK_SERVICE_MIX`].
pub fn production_profile(total_services: u32) -> TierProfile {
    let counts = apportion(total_services, &DESK_SERVICE_MIX);
    TierProfile {
        rows: Tier::ALL
            .iter()
            .enumerate()
            .map(|(i, t)| ProfileRow {
                tier: *t,
                cores: PRODUCTION_CORES[i],
                services: counts[i].max(1),
                endpoints_p50: PRODUCTION_ENDPOINTS[i].0,
                endpoints_p90: PRODUCTION_ENDPOINTS[i].1,
                endpoints_max: PRODUCTION_ENDPOINTS[i].2,
            })
            .collect(),
        call_volume: Some(PRODUCTION_CALL_VOLUME),
    }
}

/// Largest-remainder apportionment of `n` by `weights`.
fn apportion(n: u32, weights: &[f64]) -> Vec<u32> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| f64::from(n) * w / total).collect();
    let mut out: Vec<u32> = exact.iter().map(|x| x.floor() as u32).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let missing = n - out.iter().sum::<u32>();
    for &i in rest.iter().take(missing as usize) {
        out[i] += 1;
    }
    out
}

/// Ground-truth fail-close probability per tier-inversion category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailCloseFractions {
    pub always_on_to_restore_later: f64,
    pub active_migrate_to_restore_later: f64,
    pub any_to_terminate: f64,
    pub other: f64,
}

impl Default for FailCloseFractions {
    fn default() -> Self {
        // Inversion categories are mostly fail-open; active-migrate callers
        // are the most frequent offenders and calls into terminate-class
        // services the rarest.
        FailCloseFractions {
            always_on_to_restore_later: 0.05,
            active_migrate_to_restore_later: 0.08,
            any_to_terminate: 0.02,
            other: 0.30,
        }
    }
}

impl FailCloseFractions {
    pub fn none() -> Self {
        FailCloseFractions {
            always_on_to_restore_later: 0.0,
            active_migrate_to_restore_later: 0.0,
            any_to_terminate: 0.0,
            other: 0.0,
        }
    }

    fn for_pair(&self, caller: FailureClass, callee: FailureClass) -> f64 {
        use FailureClass::*;
        match (caller, callee) {
            (AlwaysOn, RestoreLater) => self.always_on_to_restore_later,
            (ActiveMigrate, RestoreLater) => self.active_migrate_to_restore_later,
            (_, Terminate) => self.any_to_terminate,
            _ => self.other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetGenConfig {
    pub seed: u64,
    pub scale: f64,
    pub profile: TierProfile,
    pub replica_sizes: Vec<u32>,
    pub min_replicas: u32,
    pub max_replicas: u32,
    /// GB per service core.
    pub mem_per_core: f64,
    pub base_startup: SimTime,
    pub startup_jitter: SimTime,
    /// Mean number of outgoing dependency edges per service.
    pub avg_out_degree: f64,
    pub fail_close: FailCloseFractions,
    pub class_by_tier: BTreeMap<Tier, FailureClass>,
    pub class_overrides: BTreeMap<String, FailureClass>,
    pub special_hardware_fraction: f64,
    /// Fraction of services younger than the onboarding stabilization period.
    pub new_service_fraction: f64,
    pub topology: TopologyConfig,
}

impl Default for FleetGenConfig {
    fn default() -> Self {
        FleetGenConfig {
            seed: 1,
            scale: 0.005,
            profile: production_profile(200),
            replica_sizes: vec![1, 2, 4, 8],
            min_replicas: 1,
            max_replicas: 100_000,
            mem_per_core: 4.0,
            base_startup: SimTime::from_secs(90),
            startup_jitter: SimTime::from_secs(30),
            avg_out_degree: 5.0,
            fail_close: FailCloseFractions::default(),
            class_by_tier: BTreeMap::new(),
            class_overrides: BTreeMap::new(),
            special_hardware_fraction: 0.0,
            new_service_fraction: 0.0,
            topology: TopologyConfig::default(),
        }
    }
}

impl FleetGenConfig {
    pub fn class_for(&self, tier: Tier) -> FailureClass {
        self.class_by_tier.get(&tier).copied().unwrap_or_else(|| default_class_for_tier(tier))
    }
}

/// Builds a complete fleet: services, dependency graph, hosts, steady-state
/// placement, batch clusters and cities. Pure in `cfg`.
pub fn generate_fleet(cfg: &FleetGenConfig) -> Result<Fleet, FleetError> {
    if !(cfg.scale > 0.0 && cfg.scale <= 1.0) {
        return Err(FleetError::InvalidProfile(format!("scale {} not in (0, 1]", cfg.scale)));
    }
    if cfg.profile.rows.iter().any(|r| r.cores < 0.0 || !r.cores.is_finite()) {
        return Err(FleetError::InvalidProfile("negative tier cores".into()));
    }
    if cfg.profile.rows.iter().map(|r| r.cores).sum::<f64>() <= 0.0 {
        return Err(FleetError::InvalidProfile("profile has no cores".into()));
    }
    if cfg.replica_sizes.is_empty() || cfg.replica_sizes.contains(&0) {
        return Err(FleetError::InvalidProfile("replica sizes must be positive".into()));
    }
    let root = SeededRng::new(cfg.seed);
    let mut rng = root.stream("fleet");
    let services = generate_services(cfg, &mut rng);
    let mut edge_rng = root.stream("fleet-edges");
    let dependencies = generate_edges(cfg, &services, &mut edge_rng);
    let topo = build_topology(&services, &cfg.topology)?;
    let fleet = Fleet {
        schema_version: SCHEMA_VERSION,
        regions: topo.regions,
        zones: topo.zones,
        clusters: topo.clusters,
        hosts: topo.hosts,
        services,
        environments: topo.environments,
        cities: topo.cities,
        dependencies,
    };
    fleet.validate()?;
    Ok(fleet)
}

fn generate_services(cfg: &FleetGenConfig, rng: &mut ChaCha8Rng) -> Vec<Service> {
    let mut sizes = cfg.replica_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let mut services = Vec::new();
    for row in &cfg.profile.rows {
        if row.services == 0 {
            continue;
        }
        let budget = (row.cores * cfg.scale).round() as u64;
        if budget == 0 {
            continue;
        }
        let n = row.services as usize;
        let per_service = budget as f64 / n as f64;
        let allowed: Vec<u32> = {
            let fit: Vec<u32> = sizes
                .iter()
                .copied()
                .filter(|s| f64::from(*s) * f64::from(cfg.min_replicas.max(1)) <= per_service)
                .collect();
            if fit.is_empty() {
                vec![sizes[0]]
            } else {
                fit
            }
        };
        let weight_dist = LogNormal::new(0.0, 0.8).expect("valid lognormal");
        let weights: Vec<f64> = (0..n).map(|_| weight_dist.sample(rng)).collect();
        let wsum: f64 = weights.iter().sum();
        let mut sized: Vec<(u32, u32)> = weights
            .iter()
            .map(|w| {
                let c = *allowed.choose(rng).expect("non-empty");
                let target = budget as f64 * w / wsum;
                let r = ((target / f64::from(c)).round() as u32).clamp(cfg.min_replicas.max(1), cfg.max_replicas);
                (c, r)
            })
            .collect();
        fill_budget(&mut sized, budget, &sizes, cfg.min_replicas.max(1), cfg.max_replicas);

        let endpoints = endpoint_dist(row);
        for (c, r) in sized {
            let id = ServiceId(services.len() as u32);
            let ep = endpoints.map_or(1, |d| (d.sample(rng).round() as u32).clamp(1, row.endpoints_max.max(1)));
            let jitter = cfg.startup_jitter.0;
            let startup = if jitter == 0 {
                cfg.base_startup
            } else {
                SimTime((cfg.base_startup.0 + rng.gen_range(0..=2 * jitter)).saturating_sub(jitter))
            };
            let name = format!("{}-{:03}", row.tier.name().to_lowercase(), id.0);
            let class = cfg.class_overrides.get(&name).copied().unwrap_or_else(|| cfg.class_for(row.tier));
            let special = rng.gen_bool(cfg.special_hardware_fraction.clamp(0.0, 1.0));
            let young = rng.gen_bool(cfg.new_service_fraction.clamp(0.0, 1.0));
            let age = if young {
                SimTime::from_hours(rng.gen_range(0..7 * 24))
            } else {
                SimTime::from_days(30)
            };
            services.push(Service {
                id,
                name,
                tier: row.tier,
                failure_class: class,
                endpoints: ep,
                cores_per_replica: c,
                mem_per_core: cfg.mem_per_core,
                base_startup: startup,
                replicas: r,
                special_hardware: special,
                deny_listed: false,
                age_at_start: age,
            });
        }
    }
    services
}

fn endpoint_dist(row: &ProfileRow) -> Option<LogNormal<f64>> {
    if row.endpoints_max <= 1 || row.endpoints_p50 <= 0.0 {
        return None;
    }
    let mu = row.endpoints_p50.ln();
    // 1.2816 is the standard normal 90th percentile.
    let sigma = (row.endpoints_p90.max(row.endpoints_p50) / row.endpoints_p50).ln() / 1.281_551_565_5;
    LogNormal::new(mu, sigma.max(1e-9)).ok()
}

/// Nudges replica counts until the tier total equals `budget`, then absorbs
/// any remainder by resizing one service's replicas.
fn fill_budget(sized: &mut [(u32, u32)], budget: u64, sizes: &[u32], min_r: u32, max_r: u32) {
    let total = |s: &[(u32, u32)]| s.iter().map(|(c, r)| u64::from(*c) * u64::from(*r)).sum::<u64>();
    let mut order: Vec<usize> = (0..sized.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(sized[i].0));
    for &i in &order {
        let c = u64::from(sized[i].0);
        let cur = total(sized);
        if cur < budget {
            let add = (budget - cur) / c;
            sized[i].1 = (u64::from(sized[i].1) + add).min(u64::from(max_r)) as u32;
        } else if cur > budget {
            let sub = ((cur - budget) / c).min(u64::from(sized[i].1 - min_r));
            sized[i].1 -= sub as u32;
        }
    }
    let cur = total(sized);
    if cur == budget {
        return;
    }
    let diff = budget as i64 - cur as i64;
    for &i in order.iter().rev() {
        let (c, r) = sized[i];
        let cores = i64::from(c) * i64::from(r) + diff;
        if cores <= 0 {
            continue;
        }
        for s in sizes.iter().rev() {
            let s64 = i64::from(*s);
            if cores % s64 == 0 {
                let nr = cores / s64;
                if nr >= i64::from(min_r) && nr <= i64::from(max_r) {
                    sized[i] = (*s, nr as u32);
                    return;
                }
            }
        }
    }
}

fn generate_edges(cfg: &FleetGenConfig, services: &[Service], rng: &mut ChaCha8Rng) -> Vec<DependencyEdge> {
    let Some(volume) = cfg.profile.call_volume else {
        return Vec::new();
    };
    if services.len() < 2 {
        return Vec::new();
    }
    let mut by_tier: [Vec<usize>; 7] = Default::default();
    for (i, s) in services.iter().enumerate() {
        by_tier[s.tier.rank()].push(i);
    }
    // A random topological rank keeps the graph acyclic.
    let mut rank: Vec<usize> = (0..services.len()).collect();
    rank.shuffle(rng);

    let mut cells = Vec::new();
    for a in 0..7 {
        for b in 0..7 {
            if volume[a][b] > 0.0 && !by_tier[a].is_empty() && !by_tier[b].is_empty() {
                cells.push((a, b, volume[a][b]));
            }
        }
    }
    let budget = (cfg.avg_out_degree * services.len() as f64).round().max(cells.len() as f64);
    let damp: f64 = cells.iter().map(|c| c.2.sqrt()).sum();

    let mut used = BTreeSet::new();
    let mut edges = Vec::new();
    for (a, b, vol) in cells {
        let want = ((budget * vol.sqrt() / damp).round() as usize).max(1);
        let mut made = Vec::new();
        let mut attempts = 0;
        while made.len() < want && attempts < want * 40 {
            attempts += 1;
            let caller = *by_tier[a].choose(rng).expect("non-empty");
            let callee = *by_tier[b].choose(rng).expect("non-empty");
            if caller == callee || rank[caller] >= rank[callee] || !used.insert((caller, callee)) {
                continue;
            }
            made.push((caller, callee));
        }
        if made.is_empty() {
            continue;
        }
        let weight = vol / made.len() as f64;
        for (caller, callee) in made {
            let (cs, ce) = (&services[caller], &services[callee]);
            let p_fc = cfg.fail_close.for_pair(cs.failure_class, ce.failure_class);
            let truth = if rng.gen_bool(p_fc.clamp(0.0, 1.0)) {
                Semantics::FailClose
            } else {
                Semantics::FailOpen
            };
            edges.push(DependencyEdge {
                caller: Endpoint { service: cs.id, endpoint: rng.gen_range(0..cs.endpoints) },
                callee: Endpoint { service: ce.id, endpoint: rng.gen_range(0..ce.endpoints) },
                semantics: Semantics::Indeterminate,
                ground_truth: truth,
                weight,
            });
        }
    }
    edges.sort_by_key(|e| (e.caller.service, e.callee.service));
    edges
}
