use std::path::Path;

use ufa::harness::{render, run_scenario, OutputFormat, ScenarioConfig};

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/reference_peak_failover.json");
    let cfg = ScenarioConfig::load(&path).expect("shipped scenario parses");
    let outcome = run_scenario(&cfg).expect("scenario runs");
    print!("{}", render(&outcome.report, OutputFormat::Table));
    let fo = outcome.record.failed_over_interval();
    println!("failed over: {fo:?}");
    println!("stopped services: {}", outcome.record.stopped_services.len());
}
