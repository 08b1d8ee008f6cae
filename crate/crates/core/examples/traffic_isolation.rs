use std::collections::BTreeSet;

use ufa::fleet::{FailureClass, RegionId, ServiceId};
use ufa::traffic::{classify_scope, detect_mode, geometric_batches, IsolationPolicy};
use ufa::fleet::CityId;
use ufa::SimTime;

fn main() {
    for tv in [84.0, 85.0, 100.0] {
        println!("traffic {tv}/100 -> {:?}", detect_mode(tv, 100.0, 0.85));
    }
    println!("scope {:?}", classify_scope(90, 100, 30, 50));

    let policy = IsolationPolicy::failover(SimTime::from_mins(60), SimTime::from_secs(30), BTreeSet::from([ServiceId(7)]));
    for s in [0, 10, 20, 30, 40] {
        let t = SimTime::from_mins(60) + SimTime::from_secs(s);
        println!(
            "t={t}: restore-later blocked {:.2}, exempt {:.2}, always-on {:.2}",
            policy.blocked_fraction(ServiceId(1), FailureClass::RestoreLater, t),
            policy.blocked_fraction(ServiceId(7), FailureClass::RestoreLater, t),
            policy.blocked_fraction(ServiceId(2), FailureClass::AlwaysOn, t),
        );
    }

    let cities: Vec<CityId> = (0..20).map(CityId).collect();
    for (i, b) in geometric_batches(&cities, &[0.05, 0.15, 0.30, 0.50]).iter().enumerate() {
        println!("batch {i} -> {}: {} cities", RegionId(1), b.len());
    }
}
