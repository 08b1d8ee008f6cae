use ufa::fleet::{generate_fleet, FailureClass, FleetGenConfig};

fn main() {
    let cfg = FleetGenConfig::default();
    let fleet = generate_fleet(&cfg).expect("default config is valid");
    println!("{} services, {} environments, {} hosts, {} cities", fleet.services.len(), fleet.environments.len(), fleet.hosts.len(), fleet.cities.len());
    for (rank, cores) in fleet.cores_by_tier() {
        println!("tier rank {rank}: {cores} cores");
    }
    for class in FailureClass::ALL {
        let n = fleet.services.iter().filter(|s| s.failure_class == class).count();
        println!("{class:?}: {n} services");
    }
    println!("fail-close edges: {}", fleet.dependencies.iter().filter(|e| e.ground_truth == ufa::depsafety::Semantics::FailClose).count());
}
