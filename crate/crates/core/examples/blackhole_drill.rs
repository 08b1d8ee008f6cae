use ufa::depsafety::{DependencyEdge, Semantics};
use ufa::fleet::{generate_fleet, FailCloseFractions, FailureClass, FleetGenConfig};
use ufa::orchestrator::{run_blackhole_drill, DrillSpec};

fn main() {
    let mut fleet = generate_fleet(&FleetGenConfig { fail_close: FailCloseFractions::none(), ..FleetGenConfig::default() }).expect("valid config");
    let spec = DrillSpec::blackhole(Vec::new(), vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0], 0.999);
    let report = run_blackhole_drill(&fleet, &spec).expect("valid spec");
    println!("fail-open fleet certified: {}", report.certified);

    let ao = fleet.services.iter().find(|s| s.failure_class == FailureClass::AlwaysOn).expect("an always-on service").id;
    let rl = fleet.services.iter().find(|s| s.failure_class == FailureClass::RestoreLater).expect("a restore-later service").id;
    fleet.dependencies.push(DependencyEdge::between(ao, rl, Semantics::FailClose));
    let report = run_blackhole_drill(&fleet, &spec).expect("valid spec");
    for s in &report.steps {
        println!("blocked {:>4.0}%  availability {:.5}  {}", s.fraction * 100.0, s.availability, if s.passed { "ok" } else { "FAIL" });
    }
    for e in &report.implicated {
        println!("implicated: {} -> {}", e.caller.service, e.callee.service);
    }
}
