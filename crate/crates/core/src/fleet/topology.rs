//! Regions, zones, hosts, batch clusters, cities, and the steady-state
//! placement of every environment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    BatchJob, City, CityId, Cluster, ClusterId, ClusterKind, EnvId, EnvKind, FailureClass,
    FleetError, Host, HostId, Lifecycle, PlacementEntry, Pool, Region, RegionId, Service,
    ServiceEnvironment, TrafficSeries, Zone, ZoneId,
};
use crate::placement::{advertise_pools, schedule, PlacementRequest};
use crate::simkernel::SimTime;

/// Steady-state placement of non-always-on classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Always-on in the stateless pool at full size per region; every other
    /// class at half size per region in the overcommit pool.
    TwoPool,
    /// Every service at full size per region in the stateless pool; the
    /// overcommit pool stays empty.
    Legacy2x,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    pub layout: Layout,
    pub region_names: [String; 2],
    pub zones_per_region: u32,
    /// Share of regional traffic received by the canary zone.
    pub canary_traffic_share: f64,
    pub host_cores: u32,
    /// GB per host core.
    pub host_mem_per_core: f64,
    pub overcommit_factor: f64,
    pub alpha_m: f64,
    /// Target fill of the stateless pool when sizing host counts.
    pub alpha_c: f64,
    /// Preemptible batch cores per region as a multiple of the region's
    /// burst demand (active-migrate plus restore-later cores).
    pub batch_capacity_factor: f64,
    pub preemptible_fraction: f64,
    pub batch_job_cores: u32,
    pub batch_restart_cost: SimTime,
    pub cities: u32,
    /// Root requests per second over all cities at the daily peak.
    pub total_rps: f64,
    /// Zipf-like skew of per-city traffic.
    pub city_skew: f64,
    pub diurnal_amplitude: f64,
    pub peak_at: SimTime,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            layout: Layout::TwoPool,
            region_names: ["region-a".into(), "region-b".into()],
            zones_per_region: 3,
            canary_traffic_share: 0.02,
            host_cores: 64,
            host_mem_per_core: 8.0,
            overcommit_factor: 1.5,
            alpha_m: 0.75,
            alpha_c: 0.9,
            batch_capacity_factor: 1.2,
            preemptible_fraction: 0.8,
            batch_job_cores: 16,
            batch_restart_cost: SimTime::from_mins(5),
            cities: 50,
            total_rps: 10.0,
            city_skew: 0.8,
            diurnal_amplitude: 0.0,
            peak_at: SimTime::from_hours(18),
        }
    }
}

impl TopologyConfig {
    /// Replicas and pool for a service's environment in one region.
    pub fn steady_shape(&self, svc: &Service) -> (u32, Pool) {
        // Services not yet managed keep a full dedicated copy per region.
        match (self.layout, svc.failure_class, svc.eligible_at(SimTime::ZERO)) {
            (_, FailureClass::AlwaysOn, _) | (Layout::Legacy2x, _, _) | (_, _, false) => (svc.replicas, Pool::Stateless),
            (Layout::TwoPool, _, true) => (svc.replicas.div_ceil(2), Pool::Overcommit),
        }
    }
}

pub struct Topology {
    pub regions: Vec<Region>,
    pub zones: Vec<Zone>,
    pub clusters: Vec<Cluster>,
    pub hosts: BTreeMap<HostId, Host>,
    pub environments: Vec<ServiceEnvironment>,
    pub cities: Vec<City>,
}

pub fn build_topology(
    services: &[Service],
    cfg: &TopologyConfig,
) -> Result<Topology, FleetError> {
    if cfg.zones_per_region == 0 || cfg.host_cores == 0 {
        return Err(FleetError::Invalid("zones_per_region and host_cores must be positive".into()));
    }
    let regions: Vec<Region> = (0..2u8)
        .map(|i| Region { id: RegionId(i), name: cfg.region_names[i as usize].clone() })
        .collect();
    let mut zones = Vec::new();
    for r in 0..2u8 {
        for z in 0..cfg.zones_per_region {
            let canary = z == 0;
            let share = if cfg.zones_per_region == 1 {
                1.0
            } else if canary {
                cfg.canary_traffic_share
            } else {
                (1.0 - cfg.canary_traffic_share) / f64::from(cfg.zones_per_region - 1)
            };
            zones.push(Zone {
                id: ZoneId(zones.len() as u32),
                region: RegionId(r),
                canary,
                traffic_share: share,
            });
        }
    }

    let mut environments = Vec::new();
    for svc in services {
        for r in 0..2u8 {
            let kind = match (svc.failure_class, svc.tier) {
                (FailureClass::Terminate, super::Tier::NP) if svc.id.0 % 2 == 0 => EnvKind::Staging,
                (FailureClass::Terminate, super::Tier::NP) => EnvKind::Shadow,
                _ => EnvKind::Production,
            };
            let (replicas, _) = cfg.steady_shape(svc);
            environments.push(ServiceEnvironment {
                id: EnvId(environments.len() as u32),
                service: svc.id,
                region: RegionId(r),
                kind,
                required_replicas: replicas,
                placement: Vec::new(),
                starting: Vec::new(),
                lifecycle: Lifecycle::Serving,
            });
        }
    }

    let mut clusters = Vec::new();
    let mut hosts = BTreeMap::new();
    for r in 0..2u8 {
        let region = RegionId(r);
        let region_zones: Vec<ZoneId> = zones.iter().filter(|z| z.region == region).map(|z| z.id).collect();
        let steady: Vec<ClusterId> = region_zones
            .iter()
            .map(|z| {
                let id = ClusterId(clusters.len() as u32);
                clusters.push(Cluster {
                    id,
                    kind: ClusterKind::SteadyState,
                    region,
                    zone: *z,
                    hosts: Vec::new(),
                    jobs: Vec::new(),
                });
                id
            })
            .collect();
        place_region(services, &mut environments, region, &steady, &mut clusters, &mut hosts, cfg)?;
        add_batch_clusters(services, region, &region_zones, &mut clusters, &mut hosts, cfg);
    }

    let cities = build_cities(cfg);
    Ok(Topology { regions, zones, clusters, hosts, environments, cities })
}

fn new_host(id: HostId, cluster: &Cluster, cfg: &TopologyConfig, pooled: bool) -> Host {
    let (stateless, overcommit) = if pooled {
        let ad = advertise_pools(cfg.host_cores, cfg.overcommit_factor);
        (ad.stateless_cores, ad.overcommit_cores)
    } else {
        (0, 0)
    };
    Host {
        id,
        cluster: cluster.id,
        zone: cluster.zone,
        physical_cores: cfg.host_cores,
        mem_per_core: cfg.host_mem_per_core,
        stateless_pool: stateless,
        overcommit_pool: overcommit,
        allocations: Vec::new(),
    }
}

fn next_host_id(hosts: &BTreeMap<HostId, Host>) -> HostId {
    hosts.keys().next_back().map_or(HostId(0), |h| HostId(h.0 + 1))
}

fn place_region(
    services: &[Service],
    environments: &mut [ServiceEnvironment],
    region: RegionId,
    steady: &[ClusterId],
    clusters: &mut [Cluster],
    hosts: &mut BTreeMap<HostId, Host>,
    cfg: &TopologyConfig,
) -> Result<(), FleetError> {
    let mut requests: Vec<PlacementRequest> = environments
        .iter()
        .filter(|e| e.region == region)
        .map(|e| {
            let svc = &services[e.service.index()];
            let (replicas, pool) = cfg.steady_shape(svc);
            PlacementRequest {
                env: e.id,
                pool,
                replicas,
                cores_per_replica: svc.cores_per_replica,
                mem_per_replica: svc.mem_per_replica(),
            }
        })
        .filter(|r| r.replicas > 0)
        .collect();
    // Stateless first, then large replicas first.
    requests.sort_by_key(|r| (r.pool, std::cmp::Reverse(r.cores_per_replica), r.env));

    let stateless: u64 = requests.iter().filter(|r| r.pool == Pool::Stateless).map(|r| r.cores()).sum();
    let per_host = cfg.alpha_c * f64::from(cfg.host_cores);
    let mut count = ((stateless as f64 / per_host).ceil() as usize).max(steady.len());

    for _ in 0..10_000 {
        let mut trial: Vec<Host> = (0..count)
            .map(|i| {
                let c = &clusters[steady[i % steady.len()].index()];
                new_host(HostId(0), c, cfg, true)
            })
            .collect();
        let base = next_host_id(hosts).0;
        for (i, h) in trial.iter_mut().enumerate() {
            h.id = HostId(base + i as u32);
        }
        let mut refs: Vec<&mut Host> = trial.iter_mut().collect();
        let out = schedule(&requests, &mut refs, &BTreeMap::new(), cfg.alpha_m);
        if out.unplaced.is_empty() {
            for a in &out.assignments {
                let env = &mut environments[a.env.index()];
                match env.placement.iter_mut().find(|p| p.host == a.host && p.pool == a.pool) {
                    Some(p) => p.replicas += a.replicas,
                    None => env.placement.push(PlacementEntry { host: a.host, pool: a.pool, replicas: a.replicas }),
                }
            }
            for h in trial {
                clusters[h.cluster.index()].hosts.push(h.id);
                hosts.insert(h.id, h);
            }
            return Ok(());
        }
        count += 1 + count / 50;
    }
    Err(FleetError::Invalid(format!("steady-state placement for {region} did not converge")))
}

fn add_batch_clusters(
    services: &[Service],
    region: RegionId,
    zones: &[ZoneId],
    clusters: &mut Vec<Cluster>,
    hosts: &mut BTreeMap<HostId, Host>,
    cfg: &TopologyConfig,
) {
    let demand: u64 = services
        .iter()
        .filter(|s| matches!(s.failure_class, FailureClass::ActiveMigrate | FailureClass::RestoreLater))
        .map(Service::cores)
        .sum();
    if demand == 0 || cfg.batch_capacity_factor <= 0.0 {
        return;
    }
    let preemptible = demand as f64 * cfg.batch_capacity_factor;
    let total = preemptible / cfg.preemptible_fraction.clamp(0.01, 1.0);
    let per_cluster = total / zones.len() as f64;
    let hosts_per = ((per_cluster / f64::from(cfg.host_cores)).ceil() as u32).max(1);
    let job = cfg.batch_job_cores.max(1);
    let mut job_id = 0;
    for z in zones {
        let id = ClusterId(clusters.len() as u32);
        let mut cluster = Cluster { id, kind: ClusterKind::Batch, region, zone: *z, hosts: Vec::new(), jobs: Vec::new() };
        for _ in 0..hosts_per {
            let hid = next_host_id(hosts);
            hosts.insert(hid, new_host(hid, &cluster, cfg, false));
            cluster.hosts.push(hid);
        }
        let cores = u64::from(hosts_per) * u64::from(cfg.host_cores);
        let pre_target = (cores as f64 * cfg.preemptible_fraction).round() as u64;
        let mut placed = 0u64;
        while placed + u64::from(job) <= cores {
            cluster.jobs.push(BatchJob {
                id: job_id,
                cores: job,
                preemptible: placed + u64::from(job) <= pre_target,
                restart_cost: cfg.batch_restart_cost,
            });
            job_id += 1;
            placed += u64::from(job);
        }
        clusters.push(cluster);
    }
}

fn build_cities(cfg: &TopologyConfig) -> Vec<City> {
    let n = cfg.cities as usize;
    let raw: Vec<f64> = (0..n).map(|i| 1.0 / ((i + 1) as f64).powf(cfg.city_skew)).collect();
    let sum: f64 = raw.iter().sum();
    let mut load = [0.0f64; 2];
    raw.iter()
        .enumerate()
        .map(|(i, w)| {
            let region = if load[1] < load[0] { RegionId(1) } else { RegionId(0) };
            load[region.index()] += w;
            City {
                id: CityId(i as u32),
                name: format!("city-{i:02}"),
                primary_region: region,
                current_region: region,
                traffic: TrafficSeries {
                    base_rps: cfg.total_rps * w / sum,
                    diurnal_amplitude: cfg.diurnal_amplitude,
                    peak_at: cfg.peak_at,
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{generate_fleet, production_profile, FleetGenConfig};

    fn cfg(layout: Layout) -> FleetGenConfig {
        FleetGenConfig {
            seed: 4,
            scale: 0.001,
            profile: production_profile(60),
            topology: TopologyConfig { layout, cities: 10, ..TopologyConfig::default() },
            ..FleetGenConfig::default()
        }
    }

    #[test]
    fn every_environment_fully_placed_within_pools() {
        for layout in [Layout::TwoPool, Layout::Legacy2x] {
            let f = generate_fleet(&cfg(layout)).unwrap();
            for e in &f.environments {
                assert_eq!(e.serving_replicas(), e.required_replicas, "{}", e.id);
            }
            for h in f.hosts.values() {
                assert!(h.allocated(Pool::Stateless) <= u64::from(h.stateless_pool));
                assert!(h.allocated(Pool::Overcommit) <= u64::from(h.overcommit_pool));
                assert!(h.mem_allocated() <= h.mem_cap(0.75) + 1e-9);
            }
            if layout == Layout::Legacy2x {
                assert!(f.hosts.values().all(|h| h.allocated(Pool::Overcommit) == 0));
            }
        }
    }

    #[test]
    fn cities_balanced_and_canary_zone_small() {
        let f = generate_fleet(&cfg(Layout::TwoPool)).unwrap();
        let per_region: Vec<f64> = (0..2u8)
            .map(|r| f.cities.iter().filter(|c| c.primary_region == RegionId(r)).map(|c| c.traffic.base_rps).sum())
            .collect();
        let total: f64 = per_region.iter().sum();
        assert!((total - 10.0).abs() < 1e-9);
        assert!((per_region[0] / total - 0.5).abs() < 0.1);
        assert!(f.zones.iter().filter(|z| z.canary).all(|z| z.traffic_share == 0.02));
    }

    #[test]
    fn batch_clusters_mostly_preemptible() {
        let f = generate_fleet(&cfg(Layout::TwoPool)).unwrap();
        let batch: Vec<_> = f.clusters.iter().filter(|c| c.kind == ClusterKind::Batch).collect();
        assert_eq!(batch.len(), 6);
        for c in batch {
            let frac = c.preemptible_cores() as f64 / c.job_cores() as f64;
            assert!((frac - 0.8).abs() < 0.1, "{frac}");
        }
    }
}
