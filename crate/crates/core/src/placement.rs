//! Two-pool CPU accounting, overcommit math, utilization-aware placement
//! and the QoS eviction controller.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fleet::{EnvId, FailureClass, Host, HostId, Pool};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlacementError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("workload does not fit even at the maximum factor {max_factor:.2}")]
    Unsatisfiable { max_factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvercommitParams {
    /// Host memory, GB per core.
    pub m_h: f64,
    /// Service memory, GB per core.
    pub m_s: f64,
    pub alpha_m: f64,
    pub alpha_c: f64,
}

impl Default for OvercommitParams {
    fn default() -> Self {
        OvercommitParams { m_h: 8.0, m_s: 4.0, alpha_m: 0.75, alpha_c: 0.9 }
    }
}

impl OvercommitParams {
    pub fn validate(&self) -> Result<(), PlacementError> {
        let positive = [self.m_h, self.m_s, self.alpha_m, self.alpha_c].iter().all(|v| *v > 0.0);
        if !positive || self.alpha_m > 1.0 || self.alpha_c > 1.0 {
            return Err(PlacementError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Largest CPU overcommit that keeps memory under its safe fraction.
pub fn max_overcommit(p: &OvercommitParams) -> f64 {
    (p.m_h / p.m_s) * (p.alpha_m / p.alpha_c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolAdvertisement {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub host: Option<HostId>,
    pub stateless_cores: u32,
    pub overcommit_cores: u32,
    pub factor: f64,
}

/// Physical cores go to the stateless pool; `(factor − 1)` of them are
/// advertised again as overcommit capacity, rounded half up.
pub fn advertise_pools(physical_cores: u32, factor: f64) -> PoolAdvertisement {
    let extra = ((factor.max(1.0) - 1.0) * f64::from(physical_cores) + 0.5 + 1e-9).floor();
    PoolAdvertisement { host: None, stateless_cores: physical_cores, overcommit_cores: extra as u32, factor }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRequest {
    pub env: EnvId,
    pub pool: Pool,
    pub replicas: u32,
    pub cores_per_replica: u32,
    pub mem_per_replica: f64,
}

impl PlacementRequest {
    pub fn cores(&self) -> u64 {
        u64::from(self.replicas) * u64::from(self.cores_per_replica)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub env: EnvId,
    pub host: HostId,
    pub pool: Pool,
    pub replicas: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOutcome {
    pub assignments: Vec<Assignment>,
    pub unplaced: Vec<PlacementRequest>,
}

impl ScheduleOutcome {
    pub fn placed_all(&self) -> bool {
        self.unplaced.is_empty()
    }

    pub fn placed_replicas(&self) -> u64 {
        self.assignments.iter().map(|a| u64::from(a.replicas)).sum()
    }
}

/// Places requests replica by replica on the host whose requested pool
/// would have the least cores left (best fit), breaking ties by lower
/// utilization and then host id. Grants are written into `hosts`.
pub fn schedule(
    requests: &[PlacementRequest],
    hosts: &mut [&mut Host],
    utilization: &BTreeMap<HostId, f64>,
    alpha_m: f64,
) -> ScheduleOutcome {
    let mut free: Vec<[u64; 2]> = hosts.iter().map(|h| [h.free(Pool::Stateless), h.free(Pool::Overcommit)]).collect();
    let mut mem_free: Vec<f64> = hosts.iter().map(|h| h.mem_cap(alpha_m) - h.mem_allocated()).collect();
    let util: Vec<f64> = hosts.iter().map(|h| utilization.get(&h.id).copied().unwrap_or(0.0)).collect();
    let mut out = ScheduleOutcome::default();
    let mut placed: BTreeMap<(EnvId, usize, Pool), u32> = BTreeMap::new();
    for req in requests {
        let slot = match req.pool {
            Pool::Stateless => 0,
            Pool::Overcommit => 1,
        };
        let need = u64::from(req.cores_per_replica);
        let mut left = req.replicas;
        while left > 0 {
            let best = (0..hosts.len())
                .filter(|&i| free[i][slot] >= need && mem_free[i] + 1e-9 >= req.mem_per_replica)
                .min_by(|&a, &b| {
                    (free[a][slot] - need)
                        .cmp(&(free[b][slot] - need))
                        .then(util[a].total_cmp(&util[b]))
                        .then(hosts[a].id.cmp(&hosts[b].id))
                });
            let Some(i) = best else { break };
            free[i][slot] -= need;
            mem_free[i] -= req.mem_per_replica;
            hosts[i].grant(req.env, req.pool, 1, req.cores_per_replica, req.mem_per_replica);
            *placed.entry((req.env, i, req.pool)).or_default() += 1;
            left -= 1;
        }
        if left > 0 {
            out.unplaced.push(PlacementRequest { replicas: left, ..req.clone() });
        }
    }
    out.assignments = placed
        .into_iter()
        .map(|((env, i, pool), replicas)| Assignment { env, host: hosts[i].id, pool, replicas })
        .collect();
    out
}

/// Smallest factor on a 0.01 grid at which `workload` (overcommit-pool
/// requests) fits on `hosts`, when only `usable_fraction` of each
/// overcommit pool may be granted. Existing allocations on the hosts are
/// kept and count against memory.
pub fn min_safe_factor(
    workload: &[PlacementRequest],
    hosts: &[Host],
    usable_fraction: f64,
    params: &OvercommitParams,
) -> Result<f64, PlacementError> {
    params.validate()?;
    if !(0.0 < usable_fraction && usable_fraction <= 1.0) {
        return Err(PlacementError::InvalidParams(format!("usable fraction {usable_fraction}")));
    }
    let max = max_overcommit(params);
    let fits = |k: u32| -> bool {
        let factor = f64::from(k) / 100.0;
        let mut trial: Vec<Host> = hosts
            .iter()
            .map(|h| {
                let mut h = h.clone();
                let pool = advertise_pools(h.physical_cores, factor).overcommit_cores;
                h.overcommit_pool = (f64::from(pool) * usable_fraction + 1e-9).floor() as u32;
                h
            })
            .collect();
        let mut refs: Vec<&mut Host> = trial.iter_mut().collect();
        schedule(workload, &mut refs, &BTreeMap::new(), params.alpha_m).placed_all()
    };
    let (mut lo, mut hi) = (100u32, (max * 100.0 + 1e-9).floor() as u32);
    if hi < lo || !fits(hi) {
        return Err(PlacementError::Unsatisfiable { max_factor: max });
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(f64::from(lo) / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QosConfig {
    pub evict_above: f64,
    pub cool_below: f64,
    pub eviction_order: Vec<FailureClass>,
}

impl Default for QosConfig {
    fn default() -> Self {
        QosConfig {
            evict_above: 0.75,
            cool_below: 0.70,
            eviction_order: vec![FailureClass::Terminate, FailureClass::RestoreLater],
        }
    }
}

/// One running replica on a host, as fractions of the host's cores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaLoad {
    pub env: EnvId,
    pub class: FailureClass,
    pub consumption: f64,
    pub granted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostLoad {
    pub host: HostId,
    pub utilization: f64,
    pub replicas: Vec<ReplicaLoad>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum QosAction {
    Evict { env: EnvId, class: FailureClass, consumption: f64 },
    Throttle { env: EnvId, to: f64 },
    Relocate { env: EnvId },
    Alarm { host: HostId, utilization: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosDecision {
    pub actions: Vec<QosAction>,
    pub projected: f64,
}

/// Evicts largest consumers class by class until the host is projected
/// below `cool_below`; then throttles and relocates active-migrate
/// replicas; raises an alarm if it still cannot cool. Always-on replicas
/// are never touched.
pub fn qos_tick(host: &HostLoad, cfg: &QosConfig) -> QosDecision {
    let mut projected = host.utilization;
    let mut actions = Vec::new();
    if projected <= cfg.evict_above {
        return QosDecision { actions, projected };
    }
    let by_size = |class: FailureClass| {
        let mut v: Vec<&ReplicaLoad> = host.replicas.iter().filter(|r| r.class == class).collect();
        v.sort_by(|a, b| b.consumption.total_cmp(&a.consumption).then(a.env.cmp(&b.env)));
        v
    };
    for class in cfg.eviction_order.iter().filter(|c| !matches!(c, FailureClass::AlwaysOn | FailureClass::ActiveMigrate)) {
        for r in by_size(*class) {
            if projected < cfg.cool_below {
                break;
            }
            projected -= r.consumption;
            actions.push(QosAction::Evict { env: r.env, class: r.class, consumption: r.consumption });
        }
    }
    if projected >= cfg.cool_below {
        let am = by_size(FailureClass::ActiveMigrate);
        for r in &am {
            if projected < cfg.cool_below {
                break;
            }
            if r.consumption > r.granted {
                projected -= r.consumption - r.granted;
                actions.push(QosAction::Throttle { env: r.env, to: r.granted });
            }
        }
        for r in &am {
            if projected < cfg.cool_below {
                break;
            }
            projected -= r.consumption.min(r.granted);
            actions.push(QosAction::Relocate { env: r.env });
        }
    }
    if projected >= cfg.cool_below {
        actions.push(QosAction::Alarm { host: host.host, utilization: host.utilization });
    }
    QosDecision { actions, projected: projected.max(0.0) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{ClusterId, ZoneId};
    use proptest::prelude::*;

    fn host(id: u32, stateless: u32, overcommit: u32) -> Host {
        Host {
            id: HostId(id),
            cluster: ClusterId(0),
            zone: ZoneId(0),
            physical_cores: stateless.max(1),
            mem_per_core: 8.0,
            stateless_pool: stateless,
            overcommit_pool: overcommit,
            allocations: Vec::new(),
        }
    }

    fn req(env: u32, pool: Pool, replicas: u32, cores: u32) -> PlacementRequest {
        PlacementRequest { env: EnvId(env), pool, replicas, cores_per_replica: cores, mem_per_replica: 0.0 }
    }

    #[test]
    fn max_overcommit_examples() {
        let p = OvercommitParams::default();
        assert!((max_overcommit(&p) - 5.0 / 3.0).abs() < 1e-9);
        let id = OvercommitParams { m_h: 4.0, m_s: 4.0, alpha_m: 0.8, alpha_c: 0.8 };
        assert!((max_overcommit(&id) - 1.0).abs() < 1e-9);
        let big = OvercommitParams { m_h: 16.0, ..p };
        assert!((max_overcommit(&big) - 10.0 / 3.0).abs() < 1e-9);
        assert_eq!(advertise_pools(100, max_overcommit(&p)).overcommit_cores, 67);
        assert!(OvercommitParams { alpha_m: 1.5, ..p }.validate().is_err());
    }

    #[test]
    fn advertise_examples() {
        let a = advertise_pools(100, 1.5);
        assert_eq!((a.stateless_cores, a.overcommit_cores), (100, 50));
        let a = advertise_pools(64, 1.5);
        assert_eq!((a.stateless_cores, a.overcommit_cores), (64, 32));
        assert_eq!(advertise_pools(100, 1.0).overcommit_cores, 0);
        // Half rounds up.
        assert_eq!(advertise_pools(3, 1.5).overcommit_cores, 2);
    }

    #[test]
    fn schedule_examples() {
        let mut h = host(0, 8, 0);
        let out = schedule(&[req(1, Pool::Stateless, 1, 4)], &mut [&mut h], &BTreeMap::new(), 0.75);
        assert!(out.placed_all());
        assert_eq!(out.assignments[0].host, HostId(0));

        let mut h = host(0, 64, 0);
        let out = schedule(&[req(1, Pool::Overcommit, 1, 4)], &mut [&mut h], &BTreeMap::new(), 0.75);
        assert_eq!(out.unplaced.len(), 1);
        assert_eq!(h.allocated(Pool::Stateless), 0);
    }

    #[test]
    fn best_fit_then_utilization_then_id() {
        let mut a = host(0, 16, 0);
        let mut b = host(1, 8, 0);
        let mut c = host(2, 8, 0);
        let util = BTreeMap::from([(HostId(1), 0.5), (HostId(2), 0.1)]);
        let out = schedule(&[req(1, Pool::Stateless, 1, 4)], &mut [&mut a, &mut b, &mut c], &util, 0.75);
        assert_eq!(out.assignments[0].host, HostId(2));
    }

    #[test]
    fn memory_cap_respected() {
        let mut h = host(0, 8, 0);
        let r = PlacementRequest { mem_per_replica: 20.0, ..req(1, Pool::Stateless, 3, 1) };
        // 8 cores × 8 GB × 0.75 = 48 GB fits two 20 GB replicas.
        let out = schedule(&[r], &mut [&mut h], &BTreeMap::new(), 0.75);
        assert_eq!(out.placed_replicas(), 2);
        assert_eq!(out.unplaced[0].replicas, 1);
    }

    /// Exhaustive oracle: the largest number of equal replicas that fit.
    fn max_packable(pools: &[u64], size: u64, n: u32) -> u32 {
        fn go(pools: &mut [u64], size: u64, left: u32) -> u32 {
            if left == 0 {
                return 0;
            }
            let mut best = 0;
            for i in 0..pools.len() {
                if pools[i] >= size {
                    pools[i] -= size;
                    best = best.max(1 + go(pools, size, left - 1));
                    pools[i] += size;
                }
            }
            best
        }
        go(&mut pools.to_vec(), size, n)
    }

    #[test]
    fn infeasible_remainder_matches_oracle() {
        let mut hs = [host(0, 8, 8), host(1, 8, 8), host(2, 8, 8)];
        let mut refs: Vec<&mut Host> = hs.iter_mut().collect();
        let out = schedule(&[req(1, Pool::Overcommit, 10, 3)], &mut refs, &BTreeMap::new(), 0.75);
        let fit = max_packable(&[8, 8, 8], 3, 10);
        assert_eq!(fit, 6);
        assert_eq!(out.placed_replicas(), u64::from(fit));
        assert_eq!(out.unplaced[0].replicas, 10 - fit);
    }

    proptest! {
        #[test]
        fn pools_never_exceeded(reqs in proptest::collection::vec((0u32..2, 1u32..6, 1u32..9), 1..20)) {
            let mut hs: Vec<Host> = (0..4).map(|i| host(i, 16, 8)).collect();
            let rs: Vec<PlacementRequest> = reqs.iter().enumerate().map(|(i, (p, n, c))| {
                req(i as u32, if *p == 0 { Pool::Stateless } else { Pool::Overcommit }, *n, *c)
            }).collect();
            let mut refs: Vec<&mut Host> = hs.iter_mut().collect();
            let out = schedule(&rs, &mut refs, &BTreeMap::new(), 0.75);
            for h in &hs {
                prop_assert!(h.allocated(Pool::Stateless) <= u64::from(h.stateless_pool));
                prop_assert!(h.allocated(Pool::Overcommit) <= u64::from(h.overcommit_pool));
            }
            let requested: u64 = rs.iter().map(|r| u64::from(r.replicas)).sum();
            let unplaced: u64 = out.unplaced.iter().map(|r| u64::from(r.replicas)).sum();
            prop_assert_eq!(out.placed_replicas() + unplaced, requested);
            for a in &out.assignments {
                prop_assert_eq!(a.pool, rs[a.env.index()].pool);
            }
        }
    }

    fn plain_hosts(n: u32, cores: u32) -> Vec<Host> {
        (0..n).map(|i| host(i, cores, 0)).collect()
    }

    #[test]
    fn unit_replicas_hit_lower_bound() {
        // 4 hosts × 100 cores, 140 one-core replicas.
        let w = [req(0, Pool::Overcommit, 140, 1)];
        let f = min_safe_factor(&w, &plain_hosts(4, 100), 1.0, &OvercommitParams::default()).unwrap();
        assert!((f - (1.0 + 140.0 / 400.0)).abs() < 1e-9);
    }

    #[test]
    fn fragmentation_costs_headroom() {
        let w = [req(0, Pool::Overcommit, 10, 8), req(1, Pool::Overcommit, 15, 4), req(2, Pool::Overcommit, 20, 2)];
        let hosts = plain_hosts(8, 48);
        let bound = 1.0 + 180.0 / (8.0 * 48.0);
        let f = min_safe_factor(&w, &hosts, 1.0, &OvercommitParams::default()).unwrap();
        assert!(f > bound, "{f} vs {bound}");
    }

    #[test]
    fn unsatisfiable_beyond_max() {
        let w = [req(0, Pool::Overcommit, 1000, 1)];
        assert!(matches!(
            min_safe_factor(&w, &plain_hosts(2, 64), 1.0, &OvercommitParams::default()),
            Err(PlacementError::Unsatisfiable { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn factor_monotone_in_volume(a in 1u32..60, b in 0u32..60) {
            let hosts = plain_hosts(4, 64);
            let p = OvercommitParams::default();
            let small = min_safe_factor(&[req(0, Pool::Overcommit, a, 2)], &hosts, 0.9, &p);
            let large = min_safe_factor(&[req(0, Pool::Overcommit, a + b, 2)], &hosts, 0.9, &p);
            if let (Ok(s), Ok(l)) = (small, large) {
                prop_assert!(l >= s);
            }
        }
    }

    fn load(env: u32, class: FailureClass, c: f64) -> ReplicaLoad {
        ReplicaLoad { env: EnvId(env), class, consumption: c, granted: c }
    }

    #[test]
    fn qos_examples() {
        let cfg = QosConfig::default();
        let h = HostLoad {
            host: HostId(0),
            utilization: 0.80,
            replicas: vec![load(1, FailureClass::Terminate, 0.12), load(2, FailureClass::AlwaysOn, 0.68)],
        };
        let d = qos_tick(&h, &cfg);
        assert_eq!(d.actions.len(), 1);
        assert!(matches!(d.actions[0], QosAction::Evict { env: EnvId(1), .. }));
        assert!((d.projected - 0.68).abs() < 1e-9);

        let calm = HostLoad { utilization: 0.74, ..h.clone() };
        assert!(qos_tick(&calm, &cfg).actions.is_empty());

        let ao = HostLoad { host: HostId(0), utilization: 0.76, replicas: vec![load(3, FailureClass::AlwaysOn, 0.76)] };
        let d = qos_tick(&ao, &cfg);
        assert_eq!(d.actions, vec![QosAction::Alarm { host: HostId(0), utilization: 0.76 }]);
    }

    #[test]
    fn am_throttled_before_relocated() {
        let cfg = QosConfig::default();
        let h = HostLoad {
            host: HostId(0),
            utilization: 0.9,
            replicas: vec![
                ReplicaLoad { env: EnvId(1), class: FailureClass::ActiveMigrate, consumption: 0.3, granted: 0.2 },
                load(2, FailureClass::AlwaysOn, 0.6),
            ],
        };
        let d = qos_tick(&h, &cfg);
        assert_eq!(d.actions[0], QosAction::Throttle { env: EnvId(1), to: 0.2 });
        assert_eq!(d.actions[1], QosAction::Relocate { env: EnvId(1) });
        assert!(d.projected < cfg.cool_below);
    }

    proptest! {
        #[test]
        fn qos_hysteresis(loads in proptest::collection::vec((0usize..4, 0.0f64..0.2), 0..10), base in 0.0f64..0.5) {
            let classes = FailureClass::ALL;
            let replicas: Vec<ReplicaLoad> = loads.iter().enumerate()
                .map(|(i, (c, x))| load(i as u32, classes[*c], *x)).collect();
            let util = base + replicas.iter().map(|r| r.consumption).sum::<f64>();
            let cfg = QosConfig::default();
            let d = qos_tick(&HostLoad { host: HostId(0), utilization: util, replicas: replicas.clone() }, &cfg);
            let alarmed = d.actions.iter().any(|a| matches!(a, QosAction::Alarm { .. }));
            if util > cfg.evict_above {
                prop_assert!(d.projected < cfg.cool_below || alarmed);
            }
            for a in &d.actions {
                if let QosAction::Evict { class, .. } = a {
                    prop_assert!(*class != FailureClass::AlwaysOn);
                }
            }
            if !alarmed {
                // Re-ticking the cooled host does nothing.
                let again = HostLoad { host: HostId(0), utilization: d.projected, replicas: vec![] };
                prop_assert!(qos_tick(&again, &cfg).actions.is_empty());
            }
        }
    }
}
