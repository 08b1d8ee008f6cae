use std::path::Path;

use ufa::fleet::RegionId;
use ufa::harness::{run_scenario, ScenarioConfig};

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    for name in ["steady_state_empty", "steady_state_populated", "reference_peak_failover"] {
        let cfg = ScenarioConfig::load(&dir.join(format!("{name}.json"))).expect("shipped scenario parses");
        let outcome = run_scenario(&cfg).expect("scenario runs");
        for u in &outcome.report.utilization {
            let fo = u.failed_over.map_or(String::new(), |f| format!(", failed over {:.3}", f.mean));
            let tag = if u.region == RegionId(1) { " (target)" } else { "" };
            println!("{name:<24} {}{tag}: steady {:.3}{fo}", u.region, u.steady.mean);
        }
    }
}
