use serde::Serialize;
use ufa::simkernel::{EventKind, Scheduler, SeededRng};
use ufa::SimTime;
use rand::Rng;

#[derive(Debug, Serialize)]
enum Ev {
    Arrive(u32),
    Depart(u32),
}

impl EventKind for Ev {
    fn kind(&self) -> &'static str {
        match self {
            Ev::Arrive(_) => "arrive",
            Ev::Depart(_) => "depart",
        }
    }
}

fn main() {
    let mut rng = SeededRng::new(42).stream("arrivals");
    let mut sched = Scheduler::new(SimTime::from_mins(5)).with_log();
    for id in 0..5 {
        let at = SimTime::from_secs(rng.gen_range(0..120));
        sched.schedule(at, Ev::Arrive(id)).expect("inside horizon");
    }
    let horizon = sched.horizon();
    while let Some(ev) = sched.pop_next(horizon) {
        println!("{:>8}  {:?}", ev.fire_at.to_string(), ev.payload);
        if let Ev::Arrive(id) = ev.payload {
            sched.schedule_in(SimTime::from_secs(90), Ev::Depart(id));
        }
    }
    println!("event log: {} bytes", sched.log_bytes().len());
}
