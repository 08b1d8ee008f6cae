use ufa::burst::{cloud_provision, estimate_burst_sufficiency, time_to_full, CloudProvider, CloudZone, Latency};
use ufa::SeededRng;
use ufa::SimTime;

fn main() {
    for (needed, rate, delay) in [(240_000, 12_000.0, SimTime::ZERO), (10_000, 500.0, SimTime::from_mins(1)), (999, 100.0, SimTime::from_secs(30))] {
        println!("{needed} cores at {rate}/min after {delay}: full in {}", time_to_full(needed, rate, delay));
    }
    println!("{:?}", estimate_burst_sufficiency(12_000, 10_000, 1.1));
    let mut provider = CloudProvider {
        zones: vec![
            CloudZone { name: "cloud-a".into(), quota: 4_000, provisioned: 0 },
            CloudZone { name: "cloud-b".into(), quota: 6_000, provisioned: 0 },
        ],
        latency: Latency::Fixed { latency: SimTime::from_mins(10) },
    };
    let mut rng = SeededRng::new(1).stream("cloud");
    let plan = cloud_provision(&mut provider, 8_000, SimTime::from_hours(1), &mut rng);
    for t in &plan.tranches {
        println!("zone {} provisions {} cores, ready at {}", provider.zones[t.zone].name, t.cores, t.ready_at);
    }
    println!("quota exhausted: {}", plan.quota_exhausted);
}
