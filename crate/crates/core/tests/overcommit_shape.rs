use std::collections::BTreeMap;

use rand::Rng;
use ufa::fleet::{Allocation, ClusterId, EnvId, Host, HostId, Pool, ZoneId};
use ufa::placement::{min_safe_factor, OvercommitParams, PlacementRequest};
use ufa::SeededRng;

const CORES: u32 = 64;
const MEM_PER_CORE: f64 = 4.0;

/// Hosts whose stateless pools are filled to `fill` of physical cores.
fn hosts(n: u32, fill: f64) -> Vec<Host> {
    (0..n)
        .map(|i| Host {
            id: HostId(i),
            cluster: ClusterId(0),
            zone: ZoneId(0),
            physical_cores: CORES,
            mem_per_core: 8.0,
            stateless_pool: CORES,
            overcommit_pool: 0,
            allocations: vec![Allocation {
                env: EnvId(10_000 + i),
                pool: Pool::Stateless,
                replicas: 1,
                cores_per_replica: (f64::from(CORES) * fill).round() as u32,
                mem_per_replica: (f64::from(CORES) * fill).round() * MEM_PER_CORE,
            }],
        })
        .collect()
}

/// Overcommit requests of mixed replica sizes totalling about `cores`.
fn workload(cores: u64, seed: u64) -> Vec<PlacementRequest> {
    let mut rng = SeededRng::new(seed).stream("workload");
    let mut out = Vec::new();
    let mut total = 0;
    while total < cores {
        let size = [2u32, 4, 8][rng.gen_range(0..3)];
        let replicas = rng.gen_range(1..=4);
        total += u64::from(size * replicas);
        out.push(PlacementRequest {
            env: EnvId(out.len() as u32),
            pool: Pool::Overcommit,
            replicas,
            cores_per_replica: size,
            mem_per_replica: f64::from(size) * MEM_PER_CORE,
        });
    }
    out
}

#[test]
fn production_shaped_workload_lands_near_one_and_a_half() {
    let params = OvercommitParams::default();
    let mut factors = BTreeMap::new();
    for seed in 1..=3 {
        let hs = hosts(40, 1.0);
        let stateless: u64 = hs.iter().flat_map(|h| &h.allocations).map(|a| a.cores()).sum();
        let w = workload(stateless / 3, seed);
        let k = min_safe_factor(&w, &hs, 0.9, &params).expect("fits under the memory bound");
        factors.insert(seed, k);
    }
    for (seed, k) in &factors {
        assert!((1.4..=1.6).contains(k), "seed {seed}: factor {k}");
    }
}

#[test]
fn factor_grows_with_overcommit_share() {
    let params = OvercommitParams::default();
    let hs = hosts(20, 1.0);
    let stateless: u64 = hs.iter().flat_map(|h| &h.allocations).map(|a| a.cores()).sum();
    let mut last = 1.0;
    for share in [0.1, 0.2, 0.3] {
        let k = min_safe_factor(&workload((stateless as f64 * share) as u64, 5), &hs, 0.9, &params).expect("fits");
        assert!(k >= last, "{share}: {k} < {last}");
        last = k;
    }
}
