use ufa::fleet::{generate_fleet, FleetGenConfig};
use ufa::harness::plan_overcommit;
use ufa::placement::{advertise_pools, max_overcommit, OvercommitParams};

fn main() {
    let params = OvercommitParams::default();
    println!("max overcommit {:.4}", max_overcommit(&params));
    let ad = advertise_pools(100, 1.5);
    println!("100 physical cores at 1.5x: stateless {} + overcommit {}", ad.stateless_cores, ad.overcommit_cores);
    let fleet = generate_fleet(&FleetGenConfig::default()).expect("valid config");
    let plan = plan_overcommit(&fleet, &params, 0.9).expect("valid params");
    for r in &plan.regions {
        println!("{}: {} overcommit cores on {} hosts, min safe factor {:?}", r.region, r.overcommit_cores, r.hosts, r.min_safe_factor);
    }
    let c = plan.capacity_ratio;
    println!("capacity ratio: legacy {:.3}, phase 1 {:.3}, phase 2 {:.3}", c.legacy, c.phase1, c.phase2);
}
