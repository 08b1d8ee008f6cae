use ufa::depsafety::{analyze_trace, attach_evidence, generate_probe_trace, harden, score, semantics_of, ClassifierConfig, Detector, ProbeConfig};
use ufa::fleet::{generate_fleet, FleetGenConfig};
use ufa::SeededRng;

fn main() {
    let fleet = generate_fleet(&FleetGenConfig::default()).expect("valid config");
    let classifier = ClassifierConfig::default();
    for noise in [0.0, 0.05] {
        let probe = ProbeConfig { records_per_edge: 400, fault_rate: 0.5, label_noise: noise, ..ProbeConfig::default() };
        let mut rng = SeededRng::new(3).stream("probe");
        let trace = generate_probe_trace(&fleet.dependencies, &probe, &mut rng);
        let classified = analyze_trace(&trace, &classifier);
        let s = score(&fleet.dependencies, &classified, &classifier);
        println!("noise {noise:.2}: {} records, precision {:.3}, recall {:.3}", trace.len(), s.precision, s.recall);
        if noise == 0.0 {
            let (mut violations, offboarded) = harden(&fleet, &semantics_of(&classified), Detector::Runtime);
            attach_evidence(&mut violations, &classified);
            println!("{} tier inversions, {} services off-boarded", violations.len(), offboarded.len());
            for v in violations.iter().take(5) {
                println!("  {:?}: {} -> {} (n={:?}, k={:?})", v.category, v.edge.caller.service, v.edge.callee.service, v.n, v.k);
            }
        }
    }
}
