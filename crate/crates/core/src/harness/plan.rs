use serde::{Deserialize, Serialize};

use super::metrics::CapacityRatios;
use crate::fleet::{capacity_ratio, CapacityPolicy, Fleet, Host, Pool, RegionId};
use crate::placement::{max_overcommit, min_safe_factor, OvercommitParams, PlacementError, PlacementRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPlan {
    pub region: RegionId,
    pub hosts: usize,
    pub physical_cores: u64,
    pub stateless_cores: u64,
    pub overcommit_cores: u64,
    /// `None` when the workload does not fit at the memory-safe maximum.
    pub min_safe_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvercommitPlan {
    pub params: OvercommitParams,
    pub usable_fraction: f64,
    pub max_factor: f64,
    pub regions: Vec<RegionPlan>,
    pub capacity_ratio: CapacityRatios,
}

/// Smallest safe factor per region for the fleet's current overcommit
/// workload, against hosts that keep their stateless allocations.
pub fn plan_overcommit(fleet: &Fleet, params: &OvercommitParams, usable_fraction: f64) -> Result<OvercommitPlan, PlacementError> {
    params.validate()?;
    let mut regions = Vec::new();
    for region in [RegionId(0), RegionId(1)] {
        let hosts: Vec<Host> = fleet
            .steady_hosts(region)
            .map(|h| {
                let mut h = h.clone();
                h.allocations.retain(|a| a.pool == Pool::Stateless);
                h
            })
            .collect();
        let workload: Vec<PlacementRequest> = fleet
            .environments
            .iter()
            .filter(|e| e.region == region)
            .filter_map(|e| {
                let replicas: u32 = e.placement.iter().chain(&e.starting).filter(|p| p.pool == Pool::Overcommit).map(|p| p.replicas).sum();
                let svc = fleet.service(e.service);
                (replicas > 0).then(|| PlacementRequest {
                    env: e.id,
                    pool: Pool::Overcommit,
                    replicas,
                    cores_per_replica: svc.cores_per_replica,
                    mem_per_replica: svc.mem_per_replica(),
                })
            })
            .collect();
        let factor = match min_safe_factor(&workload, &hosts, usable_fraction, params) {
            Ok(f) => Some(f),
            Err(PlacementError::Unsatisfiable { .. }) => None,
            Err(e) => return Err(e),
        };
        regions.push(RegionPlan {
            region,
            hosts: hosts.len(),
            physical_cores: hosts.iter().map(|h| u64::from(h.physical_cores)).sum(),
            stateless_cores: hosts.iter().flat_map(|h| &h.allocations).map(|a| a.cores()).sum(),
            overcommit_cores: workload.iter().map(|r| r.cores()).sum(),
            min_safe_factor: factor,
        });
    }
    Ok(OvercommitPlan {
        params: *params,
        usable_fraction,
        max_factor: max_overcommit(params),
        regions,
        capacity_ratio: CapacityRatios {
            legacy: capacity_ratio(fleet, &CapacityPolicy::legacy()),
            phase1: capacity_ratio(fleet, &CapacityPolicy::phase1()),
            phase2: capacity_ratio(fleet, &CapacityPolicy::phase2()),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{generate_fleet, production_profile, FleetGenConfig};

    #[test]
    fn generated_fleet_plans_within_bounds() {
        let f = generate_fleet(&FleetGenConfig { profile: production_profile(60), scale: 0.002, ..FleetGenConfig::default() }).unwrap();
        let plan = plan_overcommit(&f, &OvercommitParams::default(), 0.9).unwrap();
        assert!((plan.max_factor - 8.0 / 4.0 * 0.75 / 0.9).abs() < 1e-12);
        for r in &plan.regions {
            let k = r.min_safe_factor.expect("fits");
            assert!((1.0..=plan.max_factor).contains(&k), "{k}");
        }
        assert!(plan.capacity_ratio.phase2 < plan.capacity_ratio.legacy);
    }
}
