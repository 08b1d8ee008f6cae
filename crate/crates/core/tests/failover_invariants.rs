use std::path::PathBuf;

use ufa::harness::{run_scenario, FleetSource, ScenarioConfig};
use ufa::orchestrator::Phase;

fn reference(seed: u64) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/reference_peak_failover.json");
    let mut cfg = ScenarioConfig::load(&path).unwrap();
    cfg.seed = seed;
    if let FleetSource::Generated(g) = &mut cfg.fleet {
        g.seed = seed;
    }
    cfg
}

#[test]
fn peak_failover_holds_invariants_across_seeds() {
    for seed in [1, 2, 3] {
        let out = run_scenario(&reference(seed)).unwrap();
        let r = &out.report;
        assert!(r.violations.is_empty(), "seed {seed}: {:?}", &r.violations[..r.violations.len().min(3)]);
        assert_eq!(r.rto_violated, 0, "seed {seed}");
        assert!(!r.rto.is_empty(), "seed {seed}: no restore-later environment was terminated");
        assert!(r.class_shape.passed(), "seed {seed}: {:?}", r.class_shape);
        assert!(r.always_on_min.unwrap_or(1.0) >= 0.999, "seed {seed}: {:?}", r.always_on_min);

        let end = &r.final_state;
        assert_eq!(end.phase, Some(Phase::Steady), "seed {seed}");
        assert_eq!((end.cloud_hosts, end.cloud_provisioned, end.burst_clusters, end.locked_envs), (0, 0, 0, 0), "seed {seed}");
        assert!(out.final_fleet.clusters.iter().all(|c| c.kind != ufa::fleet::ClusterKind::Burst), "seed {seed}");

        let phases: Vec<Phase> = r.phases.iter().map(|(_, p)| *p).collect();
        let failed_over = phases.iter().position(|p| *p == Phase::FailedOver).expect("reaches failed-over");
        let locked = phases.iter().position(|p| *p == Phase::Locked).expect("locks first");
        assert!(locked < failed_over, "seed {seed}: {phases:?}");
    }
}
