//! Deterministic discrete-event simulator for tiered regional failover.
//!
//! The crate models a two-region microservice fleet whose services are
//! grouped into failure classes (always-on, active-migrate, restore-later,
//! terminate), packs them onto hosts with a separate oversubscribed CPU pool,
//! and replays peak failovers: preemptible capacity is evicted, batch
//! clusters are converted to burst capacity, cloud capacity is rented when
//! that is not enough, and city traffic is moved between regions in batches.
//! A dependency-safety toolkit classifies RPC edges as fail-open or
//! fail-close from traces and keeps unsafe callees out of termination.
//!
//! | module | contents |
//! |---|---|
//! | [`simkernel`] | virtual clock, event queue, seeded random streams |
//! | [`fleet`] | tiers, classes, topology, synthetic fleet generator |
//! | [`depsafety`] | edge classifier, tier inversions, off-boarding, canary gate |
//! | [`placement`] | pool advertisement, overcommit bounds, scheduler, QoS controller |
//! | [`traffic`] | routing, isolation, workload generation, request evaluation |
//! | [`burst`] | batch conversion, cloud provisioning, failback gates |
//! | [`orchestrator`] | failover/failback state machine and drills |
//! | [`harness`] | scenarios, metrics, reports |

pub mod burst;
pub mod depsafety;
pub mod fleet;
pub mod harness;
pub mod orchestrator;
pub mod placement;
pub mod simkernel;
pub mod traffic;

pub use simkernel::{SeededRng, SimTime};
