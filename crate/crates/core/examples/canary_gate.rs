use std::collections::BTreeSet;

use ufa::depsafety::{canary_gate, canary_window, CanaryConfig, DependencyEdge, Semantics};
use ufa::fleet::{generate_fleet, FailCloseFractions, FailureClass, FleetGenConfig};

fn main() {
    let fleet = generate_fleet(&FleetGenConfig { fail_close: FailCloseFractions::none(), ..FleetGenConfig::default() }).expect("valid config");
    let cfg = CanaryConfig::default();
    let exempt = BTreeSet::new();
    let baseline = canary_window(&fleet, &fleet.dependencies, &exempt, &cfg).expect("baseline window");
    let ao = fleet.services.iter().find(|s| s.failure_class == FailureClass::AlwaysOn).expect("an always-on service").id;
    let rl = fleet.services.iter().find(|s| s.failure_class == FailureClass::RestoreLater).expect("a restore-later service").id;
    for sem in [Semantics::FailOpen, Semantics::FailClose] {
        let deployment = [DependencyEdge::between(ao, rl, sem)];
        let report = canary_gate(&fleet, &deployment, &exempt, Some(&baseline), &cfg).expect("canary runs");
        println!("{ao} -> {rl} {sem:?}: {:?} ({} regressions)", report.verdict, report.regressions.len());
    }
}
